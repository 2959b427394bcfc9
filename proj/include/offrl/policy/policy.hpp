#pragma once

// Small causal language model used both as the behavior policy and as the
// learned policy, with optional ILQL Q/V heads and a PPO value head.

#include "offrl/corpus/corpus.hpp"
#include "offrl/nn/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace offrl::policy {

using corpus::TokenIds;
using nn::Matrix;

enum class Backbone { attention, gru };

struct CausalLMConfig {
  int vocab_size = 0;
  int dim = 64;
  int layers = 2;
  int heads = 2;
  int block = 64;  // max context + bin token + response
  Backbone backbone = Backbone::attention;
  bool zero_init_head = false;
  double init_std = 0.02;

  void validate() const;
  nlohmann::json to_json() const;
  static CausalLMConfig from_json(const nlohmann::json& j);
};

enum class Role { behavior, learned };

struct ILQLHeadsConfig {
  double eta = 1.0;  // advantage temperature
  bool target_v = false;
  double polyak = 0.005;
};

class PolicyModel {
 public:
  PolicyModel() = default;
  PolicyModel(const CausalLMConfig& cfg, unsigned long long seed);

  const CausalLMConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  Role role = Role::behavior;

  // ---- heads
  void add_ilql_heads(const ILQLHeadsConfig& cfg, unsigned long long seed);
  bool has_ilql_heads() const { return ilql_.has_value(); }
  const ILQLHeadsConfig& ilql_config() const;
  ILQLHeadsConfig& ilql_config();
  /// target_v <- polyak * v + (1 - polyak) * target_v
  void update_target_v();

  void add_value_head(unsigned long long seed);
  bool has_value_head() const { return value_head_; }

  /// Freezes ("lm.") backbone and LM head parameters, or unfreezes them.
  void set_backbone_trainable(bool trainable);

  // ---- tape forward passes. Non-const overloads let gradients reach the
  // parameters; const overloads treat every parameter as a constant.
  nn::Var hidden(nn::Tape& t, std::span<const int> tokens);
  nn::Var hidden(nn::Tape& t, std::span<const int> tokens) const;
  nn::Var lm_logits(nn::Tape& t, nn::Var hidden);
  nn::Var lm_logits(nn::Tape& t, nn::Var hidden) const;
  nn::Var q_values(nn::Tape& t, nn::Var hidden);  // n x |V|
  nn::Var q_values(nn::Tape& t, nn::Var hidden) const;
  nn::Var v_values(nn::Tape& t, nn::Var hidden);  // n x 1
  nn::Var v_values(nn::Tape& t, nn::Var hidden) const;
  nn::Var target_v_values(nn::Tape& t, nn::Var hidden) const;
  nn::Var value_head(nn::Tape& t, nn::Var hidden);  // n x 1
  nn::Var value_head(nn::Tape& t, nn::Var hidden) const;

  /// Logits for every position of `tokens` (row i predicts token i+1).
  Matrix logits(std::span<const int> tokens) const;

  nlohmann::json to_json(bool with_optimizer = true) const;
  static PolicyModel from_json(const nlohmann::json& j);

 private:
  template <class Self>
  static nn::Var hidden_impl(Self& self, nn::Tape& t, std::span<const int> tokens);
  template <class Self>
  static nn::Var mlp_head(Self& self, nn::Tape& t, nn::Var h, const std::string& prefix);

  void init_mlp_head(const std::string& prefix, int out, std::mt19937_64& rng);

  CausalLMConfig cfg_;
  nn::ParamStore params_;
  std::optional<ILQLHeadsConfig> ilql_;
  bool value_head_ = false;
};

// ---- sequences

/// context ++ [bin token] ++ response, with the index of the first response token.
struct Sequence {
  TokenIds tokens;
  int response_start = 0;
};
Sequence make_sequence(std::span<const int> context, std::span<const int> response,
                       std::optional<int> condition_token = std::nullopt);

// ---- scoring and decoding

/// Total log-probability of the response tokens given the context (and the
/// optional bin token); context positions are excluded.
double log_prob(const PolicyModel& model, std::span<const int> context, std::span<const int> response,
                std::optional<int> condition_token = std::nullopt);

/// Per-token log-probabilities of the response tokens.
std::vector<double> token_log_probs(const PolicyModel& model, std::span<const int> context,
                                    std::span<const int> response, std::optional<int> condition_token = std::nullopt);

/// exp(mean response-token NLL) over all pairs.
double perplexity(const PolicyModel& model, const std::vector<corpus::ContextResponsePair>& pairs);

struct ILQLValues {
  Matrix q;               // |response| x |V|, row t = Q(s_t, .)
  std::vector<double> v;  // |response| + 1 entries; v.back() = 0 (terminal)
};
ILQLValues ilql_values(const PolicyModel& model, std::span<const int> context, std::span<const int> response);

/// log_softmax(log pi_beta(.|s) + eta * (Q(s,.) - V(s))) at the end of context ++ prefix.
std::vector<double> implicit_policy_logits(const PolicyModel& model, std::span<const int> context,
                                           std::span<const int> prefix);

struct DecodeConfig {
  enum class Mode { greedy, sample };
  Mode mode = Mode::greedy;
  double temperature = 1.0;
  int top_k = 0;  // 0 = full vocabulary
  int max_len = 16;
  int n = 1;
  bool implicit = false;  // decode from the ILQL implicit policy

  void validate() const;
};

/// Next-token log-probabilities after `tokens` under the decode policy, with
/// PAD, SEP and bin tokens masked out.
std::vector<double> next_token_log_probs(const PolicyModel& model, std::span<const int> tokens,
                                         const DecodeConfig& decode, const corpus::Vocab& vocab);

/// n responses, each ending in EOS or cut at max_len. A condition token is
/// placed between the context's SEP and the first response token and is not
/// part of the returned responses.
std::vector<TokenIds> sample_responses(const PolicyModel& model, std::span<const int> context,
                                       const DecodeConfig& decode, std::optional<int> condition_token,
                                       const corpus::Vocab& vocab, std::mt19937_64& rng);

// ---- checkpoints

struct CheckpointMeta {
  std::string vocab_hash;
  nlohmann::json provenance = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model, const CheckpointMeta& meta);
PolicyModel load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace offrl::policy
