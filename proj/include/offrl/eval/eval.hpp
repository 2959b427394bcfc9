#pragma once

// Generator and ranker evaluation plus the ablation sweeps.

#include "offrl/policy/policy.hpp"
#include "offrl/rewards/rewards.hpp"
#include "offrl/train/trainers.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace offrl::eval {

using corpus::ContextResponsePair;
using corpus::TokenIds;

inline constexpr int kHistogramBins = 10;

/// Histogram bin of a similarity score: [k/10, (k+1)/10), top bin closed.
int histogram_bin(double score);

struct GenerationOptions {
  std::optional<int> condition_token;  // DT: the top return bin
  bool implicit = false;               // ILQL: decode the implicit policy
  int max_len = 16;
  int topk_max = 5;  // samples per context for the top-k curve; 0 disables it
  double temperature = 1.0;
  unsigned long long seed = 0;
  // Reference LM for the perplexity of the greedy responses; perplexity is
  // reported as NaN without one.
  const policy::PolicyModel* reference = nullptr;
};

struct GenerationReport {
  std::string method;
  unsigned long long seed = 0;
  double fraction = 1.0;
  std::size_t contexts = 0;
  double click = 0.0;  // mean reward of the greedy response
  double token_f1 = 0.0;
  double bleu = 0.0;
  double perplexity = 0.0;
  std::array<double, kHistogramBins> histogram{};  // mass per similarity bin
  std::vector<double> topk;                        // topk[k-1] = mean best-of-k reward
};

GenerationReport eval_generation(const policy::PolicyModel& model, const std::vector<ContextResponsePair>& test,
                                 const rewards::RewardModel& reward, const corpus::Vocab& vocab,
                                 const GenerationOptions& opts);

// ---------------------------------------------------------------- ranking

/// Shared candidate sets: n behavior-policy samples per test context.
struct CandidateSet {
  std::vector<std::vector<TokenIds>> candidates;  // [context][candidate]
  std::vector<std::vector<double>> rewards;
  std::vector<std::string> hashes;  // per context, over the candidate tokens

  /// Hash over every context's candidate hash.
  std::string hash() const;
};

CandidateSet make_candidates(const policy::PolicyModel& behavior, const std::vector<ContextResponsePair>& test,
                             const rewards::RewardModel& reward, const corpus::Vocab& vocab, int n, int max_len,
                             unsigned long long seed);

/// Higher is better. Receives the context index and candidate index too.
using CandidateScorer =
    std::function<double(const ContextResponsePair& pair, const TokenIds& candidate, std::size_t context, std::size_t index)>;

CandidateScorer log_prob_scorer(const policy::PolicyModel& model, std::optional<int> condition_token = std::nullopt);
CandidateScorer critic_scorer(const policy::PolicyModel& model, train::CriticScore how);
CandidateScorer oracle_scorer(const CandidateSet& set);
CandidateScorer random_scorer(unsigned long long seed);

struct RankReport {
  std::string method;
  unsigned long long seed = 0;
  double mean_reward = 0.0;
  std::vector<int> picks;
  std::string candidates_hash;
};

/// Picks the argmax-scored candidate per context; ties go to the lowest index.
RankReport eval_ranker(const std::string& method, const CandidateSet& set, const std::vector<ContextResponsePair>& test,
                       const CandidateScorer& scorer);

// ---------------------------------------------------------------- ablations

struct AblationPoint {
  std::string method;
  double param = 0.0;
  double value = 0.0;        // mean greedy similarity on the test contexts
  std::size_t records = 0;   // training records used
};

struct SweepInputs {
  const policy::PolicyModel* behavior = nullptr;
  const train::OfflineDataset* train = nullptr;
  const train::OfflineDataset* val = nullptr;
  const std::vector<ContextResponsePair>* test = nullptr;
  const rewards::RewardModel* reward = nullptr;
  const corpus::Vocab* vocab = nullptr;
  int max_len = 16;

  void validate() const;
};

/// TF-Top per return quantile. q = 0 keeps every record; q = 1 keeps only the
/// human records.
std::vector<AblationPoint> ablate_threshold(const SweepInputs& in, const std::vector<double>& quantiles,
                                            const train::SupervisedConfig& cfg);

/// ILQL per KL weight, scored by greedy decoding of the implicit policy.
std::vector<AblationPoint> ablate_alpha(const SweepInputs& in, const std::vector<double>& alphas,
                                        const train::ILQLConfig& cfg);

/// DT and TF-Top on context-group subsamples of the offline dataset.
std::vector<AblationPoint> data_fraction_sweep(const SweepInputs& in, const std::vector<double>& fractions,
                                               const train::SupervisedConfig& cfg, const train::BinQuantizer& q,
                                               const train::TopFilterConfig& filter, unsigned long long seed);

/// Mean reward of greedy decoding (optionally conditioned or implicit).
double greedy_reward(const policy::PolicyModel& model, const std::vector<ContextResponsePair>& test,
                     const rewards::RewardModel& reward, const corpus::Vocab& vocab, std::optional<int> condition,
                     bool implicit, int max_len);

}  // namespace offrl::eval
