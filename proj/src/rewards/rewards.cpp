#include "offrl/rewards/rewards.hpp"

#include "offrl/rewards/external.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace offrl::rewards {

std::string_view scorer_name(Scorer s) {
  switch (s) {
    case Scorer::exact_match: return "exact_match";
    case Scorer::token_f1: return "token_f1";
    case Scorer::bleu: return "bleu";
    case Scorer::paraphrase_class: return "paraphrase_class";
    case Scorer::external: return "external";
  }
  return "unknown";
}

Scorer scorer_from_name(std::string_view name) {
  for (Scorer s : {Scorer::exact_match, Scorer::token_f1, Scorer::bleu, Scorer::paraphrase_class, Scorer::external}) {
    if (scorer_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown scorer \"" + std::string(name) + "\"");
}

void RewardSpec::validate() const {
  if (!(click_threshold > 0.0 && click_threshold < 1.0)) {
    throw std::invalid_argument("click_threshold must lie in (0, 1)");
  }
  if (scorer == Scorer::external && scorer_cmd.empty()) {
    throw std::invalid_argument("external scorer requires scorer_cmd");
  }
}

std::string RewardSpec::describe() const {
  std::ostringstream os;
  os << scorer_name(scorer);
  if (binarize) os << "|click>=" << click_threshold;
  return os.str();
}

nlohmann::json RewardSpec::to_json() const {
  nlohmann::json j = {{"scorer", scorer_name(scorer)}, {"click_threshold", click_threshold}, {"binarize", binarize}};
  if (!scorer_cmd.empty()) j["scorer_cmd"] = scorer_cmd;
  return j;
}

RewardSpec RewardSpec::from_json(const nlohmann::json& j) {
  RewardSpec s;
  if (j.contains("scorer")) s.scorer = scorer_from_name(j.at("scorer").get<std::string>());
  s.click_threshold = j.value("click_threshold", s.click_threshold);
  s.binarize = j.value("binarize", s.binarize);
  s.scorer_cmd = j.value("scorer_cmd", s.scorer_cmd);
  return s;
}

double exact_match(std::span<const int> generated, std::span<const int> target) {
  if (generated.empty() || target.empty()) return 0.0;
  return std::equal(generated.begin(), generated.end(), target.begin(), target.end()) ? 1.0 : 0.0;
}

double token_f1(std::span<const int> generated, std::span<const int> target) {
  if (generated.empty() || target.empty()) return 0.0;
  std::map<int, int> counts;
  for (int t : target) ++counts[t];
  int overlap = 0;
  for (int g : generated) {
    auto it = counts.find(g);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(generated.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(target.size());
  return 2.0 * precision * recall / (precision + recall);
}

double bleu(std::span<const int> generated, std::span<const int> target, int max_n) {
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be at least 1");
  if (generated.empty() || target.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    if (generated.size() < un) return 0.0;
    std::map<std::vector<int>, int> ref;
    for (std::size_t i = 0; i + un <= target.size(); ++i) {
      ++ref[std::vector<int>(target.begin() + static_cast<std::ptrdiff_t>(i),
                             target.begin() + static_cast<std::ptrdiff_t>(i + un))];
    }
    std::map<std::vector<int>, int> hyp;
    for (std::size_t i = 0; i + un <= generated.size(); ++i) {
      ++hyp[std::vector<int>(generated.begin() + static_cast<std::ptrdiff_t>(i),
                             generated.begin() + static_cast<std::ptrdiff_t>(i + un))];
    }
    int clipped = 0;
    int total = 0;
    for (const auto& [gram, c] : hyp) {
      total += c;
      auto it = ref.find(gram);
      if (it != ref.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double c = static_cast<double>(generated.size());
  const double r = static_cast<double>(target.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return std::clamp(bp * std::exp(log_sum / max_n), 0.0, 1.0);
}

double paraphrase_class_reward(std::span<const int> generated, const corpus::ContextResponsePair& pair) {
  if (!pair.paraphrase) throw std::invalid_argument("pair has no paraphrase class");
  if (generated.empty()) return 0.0;
  for (const auto& m : pair.paraphrase->members) {
    if (std::equal(generated.begin(), generated.end(), m.begin(), m.end())) return 1.0;
  }
  return 0.0;
}

int click(double score, double threshold) { return score >= threshold ? 1 : 0; }

RewardModel::RewardModel(RewardSpec spec, const corpus::Vocab& vocab) : spec_(std::move(spec)), vocab_(&vocab) {
  spec_.validate();
  if (spec_.scorer == Scorer::external) external_ = std::make_unique<ExternalScorer>(spec_.scorer_cmd);
}

RewardModel::~RewardModel() = default;
RewardModel::RewardModel(RewardModel&&) noexcept = default;
RewardModel& RewardModel::operator=(RewardModel&&) noexcept = default;

double RewardModel::similarity(const TokenIds& generated, const corpus::ContextResponsePair& target) const {
  const TokenIds g = corpus::surface(generated, *vocab_);
  const TokenIds t = corpus::surface(target.response, *vocab_);
  switch (spec_.scorer) {
    case Scorer::exact_match: return exact_match(g, t);
    case Scorer::token_f1: return token_f1(g, t);
    case Scorer::bleu: return bleu(g, t);
    case Scorer::paraphrase_class: return paraphrase_class_reward(g, target);
    case Scorer::external:
      if (g.empty()) return 0.0;
      return external_->score({{vocab_->decode(g), vocab_->decode(t)}}).front();
  }
  return 0.0;
}

double RewardModel::reward(const TokenIds& generated, const corpus::ContextResponsePair& target) const {
  if (spec_.scorer == Scorer::external) return rewards({generated}, {&target}).front();
  const double s = similarity(generated, target);
  return spec_.binarize ? static_cast<double>(click(s, spec_.click_threshold)) : s;
}

std::vector<double> RewardModel::rewards(const std::vector<TokenIds>& generated,
                                         const std::vector<const corpus::ContextResponsePair*>& targets) const {
  if (generated.size() != targets.size()) throw std::invalid_argument("rewards: size mismatch");
  std::vector<double> out(generated.size());
  if (spec_.scorer != Scorer::external) {
    for (std::size_t i = 0; i < generated.size(); ++i) out[i] = reward(generated[i], *targets[i]);
    return out;
  }
  std::vector<TextPair> batch;
  batch.reserve(generated.size());
  for (std::size_t i = 0; i < generated.size(); ++i) {
    batch.emplace_back(vocab_->decode(corpus::surface(generated[i], *vocab_)),
                       vocab_->decode(corpus::surface(targets[i]->response, *vocab_)));
  }
  std::vector<double> s = external_->score(batch);
  for (std::size_t i = 0; i < s.size(); ++i) {
    // The empty-response rule holds for every scorer, including external ones.
    if (corpus::surface(generated[i], *vocab_).empty()) s[i] = 0.0;
    out[i] = spec_.binarize ? static_cast<double>(click(s[i], spec_.click_threshold)) : s[i];
  }
  return out;
}

mdp::RewardFn RewardModel::as_fn() const {
  return [this](const TokenIds& generated, const corpus::ContextResponsePair& target) {
    return reward(generated, target);
  };
}

}  // namespace offrl::rewards
