#pragma once

// Terminal similarity rewards in [0, 1] and the thresholded click reward.

#include "offrl/corpus/corpus.hpp"
#include "offrl/mdp/episode.hpp"

#include <json.hpp>

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace offrl::rewards {

using corpus::TokenIds;

enum class Scorer { exact_match, token_f1, bleu, paraphrase_class, external };

std::string_view scorer_name(Scorer s);
Scorer scorer_from_name(std::string_view name);

struct RewardSpec {
  Scorer scorer = Scorer::paraphrase_class;
  // Scorer-relative; 0.6 is the BERTScore threshold and has no calibrated
  // counterpart for token-F1.
  double click_threshold = 0.6;
  bool binarize = true;
  std::string scorer_cmd;  // Scorer::external only

  void validate() const;
  std::string describe() const;
  nlohmann::json to_json() const;
  static RewardSpec from_json(const nlohmann::json& j);
};

// All scorers take surface tokens: EOS/SEP/PAD and bin tokens are stripped
// by the callers below via corpus::surface(). Empty inputs score 0.
double exact_match(std::span<const int> generated, std::span<const int> target);
double token_f1(std::span<const int> generated, std::span<const int> target);
/// Geometric mean of clipped n-gram precisions times the brevity penalty,
/// without smoothing.
double bleu(std::span<const int> generated, std::span<const int> target, int max_n = 4);
/// 1 if `generated` equals one realization of the pair's paraphrase class.
double paraphrase_class_reward(std::span<const int> generated, const corpus::ContextResponsePair& pair);

/// 1 iff score >= threshold.
int click(double score, double threshold);

class ExternalScorer;

/// Scores (generated, target) pairs under a RewardSpec. Local scorers are
/// pure; the external scorer owns one child process and is not reentrant.
class RewardModel {
 public:
  RewardModel(RewardSpec spec, const corpus::Vocab& vocab);
  ~RewardModel();
  RewardModel(RewardModel&&) noexcept;
  RewardModel& operator=(RewardModel&&) noexcept;

  const RewardSpec& spec() const { return spec_; }

  /// Continuous similarity in [0, 1] before binarization.
  double similarity(const TokenIds& generated, const corpus::ContextResponsePair& target) const;
  /// The reward: click(similarity) when binarize is set, else similarity.
  double reward(const TokenIds& generated, const corpus::ContextResponsePair& target) const;
  /// Batch form; uses one round trip for the external scorer.
  std::vector<double> rewards(const std::vector<TokenIds>& generated,
                              const std::vector<const corpus::ContextResponsePair*>& targets) const;

  mdp::RewardFn as_fn() const;

 private:
  RewardSpec spec_;
  const corpus::Vocab* vocab_;
  std::unique_ptr<ExternalScorer> external_;
};

}  // namespace offrl::rewards
