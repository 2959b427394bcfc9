#include "offrl/util/hash.hpp"

#include <openssl/evp.h>

#include <array>
#include <stdexcept>

namespace offrl::util {

namespace {

std::array<unsigned char, 32> sha256(std::string_view data) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  return out;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  static constexpr char digits[] = "0123456789abcdef";
  const auto d = sha256(data);
  std::string hex;
  hex.reserve(64);
  for (unsigned char b : d) {
    hex.push_back(digits[b >> 4]);
    hex.push_back(digits[b & 0xF]);
  }
  return hex;
}

std::string short_hash(std::string_view data) { return sha256_hex(data).substr(0, 16); }

unsigned long long stable_u64(std::string_view data) {
  const auto d = sha256(data);
  unsigned long long v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | d[static_cast<std::size_t>(i)];
  return v;
}

unsigned long long derive_seed(unsigned long long root, std::string_view stage) {
  return stable_u64(std::to_string(root) + "/" + std::string(stage));
}

}  // namespace offrl::util
