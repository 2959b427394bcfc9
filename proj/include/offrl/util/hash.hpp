#pragma once

#include <string>
#include <string_view>

namespace offrl::util {

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

/// First 16 hex digits of sha256_hex, for compact provenance tags.
std::string short_hash(std::string_view data);

/// Stable 64-bit value derived from SHA-256; used for seed-stable bucketing.
unsigned long long stable_u64(std::string_view data);

/// Deterministic child seed for a named stage of a run.
unsigned long long derive_seed(unsigned long long root, std::string_view stage);

}  // namespace offrl::util
