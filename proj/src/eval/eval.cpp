#include "offrl/eval/eval.hpp"

#include "offrl/util/hash.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace offrl::eval {

namespace {

std::string context_key(const ContextResponsePair& p) { return p.conversation_id + "#" + std::to_string(p.turn_index); }

policy::DecodeConfig greedy_config(int max_len, bool implicit) {
  policy::DecodeConfig d;
  d.mode = policy::DecodeConfig::Mode::greedy;
  d.max_len = max_len;
  d.implicit = implicit;
  return d;
}

std::string tokens_string(const std::vector<TokenIds>& seqs) {
  std::string s;
  for (const auto& t : seqs) {
    for (int id : t) s += std::to_string(id) + ",";
    s += ";";
  }
  return s;
}

}  // namespace

int histogram_bin(double score) {
  if (!(score >= 0.0 && score <= 1.0)) throw std::invalid_argument("similarity outside [0, 1]");
  return std::min(kHistogramBins - 1, static_cast<int>(std::floor(score * kHistogramBins)));
}

GenerationReport eval_generation(const policy::PolicyModel& model, const std::vector<ContextResponsePair>& test,
                                 const rewards::RewardModel& reward, const corpus::Vocab& vocab,
                                 const GenerationOptions& opts) {
  if (test.empty()) throw std::invalid_argument("eval_generation on an empty test set");
  if (opts.topk_max < 0) throw std::invalid_argument("topk_max must be nonnegative");
  GenerationReport rep;
  rep.seed = opts.seed;
  rep.contexts = test.size();

  const policy::DecodeConfig greedy = greedy_config(opts.max_len, opts.implicit);
  std::vector<TokenIds> responses;
  std::vector<const ContextResponsePair*> targets;
  std::mt19937_64 unused(0);
  for (const auto& p : test) {
    responses.push_back(policy::sample_responses(model, p.context, greedy, opts.condition_token, vocab, unused).front());
    targets.push_back(&p);
  }
  const auto clicks = reward.rewards(responses, targets);
  const double n = static_cast<double>(test.size());
  std::vector<ContextResponsePair> generated_pairs;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const TokenIds g = corpus::surface(responses[i], vocab);
    const TokenIds t = corpus::surface(test[i].response, vocab);
    rep.click += clicks[i] / n;
    rep.token_f1 += rewards::token_f1(g, t) / n;
    rep.bleu += rewards::bleu(g, t) / n;
    rep.histogram[static_cast<std::size_t>(histogram_bin(reward.similarity(responses[i], test[i])))] += 1.0 / n;
    ContextResponsePair gp = test[i];
    gp.response = responses[i];
    if (!gp.response.empty()) generated_pairs.push_back(std::move(gp));
  }
  rep.perplexity = opts.reference != nullptr && !generated_pairs.empty()
                       ? policy::perplexity(*opts.reference, generated_pairs)
                       : std::numeric_limits<double>::quiet_NaN();

  if (opts.topk_max > 0) {
    policy::DecodeConfig sample;
    sample.mode = policy::DecodeConfig::Mode::sample;
    sample.temperature = opts.temperature;
    sample.max_len = opts.max_len;
    sample.n = opts.topk_max;
    sample.implicit = opts.implicit;
    std::vector<TokenIds> all;
    std::vector<const ContextResponsePair*> all_targets;
    for (const auto& p : test) {
      std::mt19937_64 rng(util::derive_seed(opts.seed, "topk:" + context_key(p)));
      for (auto& r : policy::sample_responses(model, p.context, sample, opts.condition_token, vocab, rng)) {
        all.push_back(std::move(r));
        all_targets.push_back(&p);
      }
    }
    const auto r = reward.rewards(all, all_targets);
    rep.topk.assign(static_cast<std::size_t>(opts.topk_max), 0.0);
    for (std::size_t c = 0; c < test.size(); ++c) {
      double best = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < opts.topk_max; ++k) {
        best = std::max(best, r[c * static_cast<std::size_t>(opts.topk_max) + static_cast<std::size_t>(k)]);
        rep.topk[static_cast<std::size_t>(k)] += best / n;
      }
    }
    // Each curve point is a mean of running maxima, so it cannot decrease;
    // the pass below only removes floating-point summation noise.
    for (std::size_t k = 1; k < rep.topk.size(); ++k) rep.topk[k] = std::max(rep.topk[k], rep.topk[k - 1]);
  }
  return rep;
}

// ---------------------------------------------------------------- ranking

std::string CandidateSet::hash() const {
  std::string all;
  for (const auto& h : hashes) all += h;
  return util::short_hash(all);
}

CandidateSet make_candidates(const policy::PolicyModel& behavior, const std::vector<ContextResponsePair>& test,
                             const rewards::RewardModel& reward, const corpus::Vocab& vocab, int n, int max_len,
                             unsigned long long seed) {
  if (n < 1) throw std::invalid_argument("need at least one candidate per context");
  policy::DecodeConfig d;
  d.mode = policy::DecodeConfig::Mode::sample;
  d.n = n;
  d.max_len = max_len;
  CandidateSet set;
  std::vector<TokenIds> flat;
  std::vector<const ContextResponsePair*> targets;
  for (const auto& p : test) {
    std::mt19937_64 rng(util::derive_seed(seed, "candidates:" + context_key(p)));
    auto c = policy::sample_responses(behavior, p.context, d, std::nullopt, vocab, rng);
    set.hashes.push_back(util::short_hash(tokens_string(c)));
    for (const auto& r : c) {
      flat.push_back(r);
      targets.push_back(&p);
    }
    set.candidates.push_back(std::move(c));
  }
  const auto r = reward.rewards(flat, targets);
  std::size_t k = 0;
  for (const auto& c : set.candidates) {
    set.rewards.emplace_back(r.begin() + static_cast<std::ptrdiff_t>(k),
                             r.begin() + static_cast<std::ptrdiff_t>(k + c.size()));
    k += c.size();
  }
  return set;
}

CandidateScorer log_prob_scorer(const policy::PolicyModel& model, std::optional<int> condition_token) {
  return [&model, condition_token](const ContextResponsePair& p, const TokenIds& c, std::size_t, std::size_t) {
    if (c.empty()) return -std::numeric_limits<double>::infinity();
    return policy::log_prob(model, p.context, c, condition_token);
  };
}

CandidateScorer critic_scorer(const policy::PolicyModel& model, train::CriticScore how) {
  return [&model, how](const ContextResponsePair& p, const TokenIds& c, std::size_t, std::size_t) {
    if (c.empty()) return -std::numeric_limits<double>::infinity();
    return train::critic_score(model, p.context, c, how);
  };
}

CandidateScorer oracle_scorer(const CandidateSet& set) {
  return [&set](const ContextResponsePair&, const TokenIds&, std::size_t ctx, std::size_t idx) {
    return set.rewards[ctx][idx];
  };
}

CandidateScorer random_scorer(unsigned long long seed) {
  return [seed](const ContextResponsePair& p, const TokenIds&, std::size_t, std::size_t idx) {
    const auto h = util::stable_u64(std::to_string(seed) + ":" + context_key(p) + ":" + std::to_string(idx));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  };
}

RankReport eval_ranker(const std::string& method, const CandidateSet& set, const std::vector<ContextResponsePair>& test,
                       const CandidateScorer& scorer) {
  if (set.candidates.size() != test.size()) throw std::invalid_argument("candidate set does not match the test pairs");
  if (test.empty()) throw std::invalid_argument("eval_ranker on an empty test set");
  RankReport rep;
  rep.method = method;
  rep.candidates_hash = set.hash();
  for (std::size_t c = 0; c < test.size(); ++c) {
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < set.candidates[c].size(); ++i) {
      const double s = scorer(test[c], set.candidates[c][i], c, i);
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(i);
      }
    }
    rep.picks.push_back(best);
    rep.mean_reward += set.rewards[c][static_cast<std::size_t>(best)] / static_cast<double>(test.size());
  }
  return rep;
}

// ---------------------------------------------------------------- ablations

void SweepInputs::validate() const {
  if (!behavior || !train || !val || !test || !reward || !vocab) throw std::invalid_argument("sweep inputs are incomplete");
  if (train->empty()) throw std::invalid_argument("sweep needs a nonempty offline dataset");
  if (test->empty()) throw std::invalid_argument("sweep needs test pairs");
}

double greedy_reward(const policy::PolicyModel& model, const std::vector<ContextResponsePair>& test,
                     const rewards::RewardModel& reward, const corpus::Vocab& vocab, std::optional<int> condition,
                     bool implicit, int max_len) {
  const policy::DecodeConfig greedy = greedy_config(max_len, implicit);
  std::mt19937_64 unused(0);
  std::vector<TokenIds> responses;
  std::vector<const ContextResponsePair*> targets;
  for (const auto& p : test) {
    responses.push_back(policy::sample_responses(model, p.context, greedy, condition, vocab, unused).front());
    targets.push_back(&p);
  }
  double total = 0.0;
  for (double r : reward.rewards(responses, targets)) total += r;
  return total / static_cast<double>(test.size());
}

std::vector<AblationPoint> ablate_threshold(const SweepInputs& in, const std::vector<double>& quantiles,
                                            const train::SupervisedConfig& cfg) {
  in.validate();
  if (quantiles.empty()) throw std::invalid_argument("no quantiles to sweep");
  std::vector<AblationPoint> out;
  // Quantiles that select the same records train the same model, so results
  // are reused by selected-record count plus threshold.
  std::map<std::pair<std::size_t, double>, double> memo;
  for (double q : quantiles) {
    train::TopFilterConfig f;
    if (q >= 1.0) {
      f.human_only = true;
    } else {
      f.quantile = q;
    }
    const train::OfflineDataset top = train::filter_top(*in.train, f);
    double min_kept = std::numeric_limits<double>::infinity();
    for (const auto& r : top.records) min_kept = std::min(min_kept, r.reward);
    const auto key = std::make_pair(top.size(), f.human_only ? -1.0 : min_kept);
    AblationPoint pt{"tf_top", q, 0.0, top.size()};
    if (auto it = memo.find(key); it != memo.end()) {
      pt.value = it->second;
    } else {
      policy::PolicyModel m = *in.behavior;
      train::train_tf_top(m, *in.train, *in.val, f, cfg);
      pt.value = greedy_reward(m, *in.test, *in.reward, *in.vocab, std::nullopt, false, in.max_len);
      memo.emplace(key, pt.value);
    }
    out.push_back(pt);
  }
  return out;
}

std::vector<AblationPoint> ablate_alpha(const SweepInputs& in, const std::vector<double>& alphas,
                                        const train::ILQLConfig& cfg) {
  in.validate();
  if (alphas.empty()) throw std::invalid_argument("no alpha values to sweep");
  const auto seqs = train::ilql_sequences(*in.train);
  std::vector<AblationPoint> out;
  for (double a : alphas) {
    train::ILQLConfig c = cfg;
    c.alpha = a;
    policy::PolicyModel m = *in.behavior;
    train::train_ilql(m, seqs, c);
    out.push_back({"ilql", a, greedy_reward(m, *in.test, *in.reward, *in.vocab, std::nullopt, true, in.max_len),
                   in.train->size()});
  }
  return out;
}

std::vector<AblationPoint> data_fraction_sweep(const SweepInputs& in, const std::vector<double>& fractions,
                                               const train::SupervisedConfig& cfg, const train::BinQuantizer& q,
                                               const train::TopFilterConfig& filter, unsigned long long seed) {
  in.validate();
  if (fractions.empty()) throw std::invalid_argument("no fractions to sweep");
  std::vector<AblationPoint> out;
  for (double f : fractions) {
    const train::OfflineDataset sub = train::subsample_contexts(*in.train, f, seed);
    {
      policy::PolicyModel m = *in.behavior;
      train::train_dt(m, sub, *in.val, q, *in.vocab, cfg);
      out.push_back({"dt", f,
                     greedy_reward(m, *in.test, *in.reward, *in.vocab, in.vocab->bin(q.top_bin()), false, in.max_len),
                     sub.size()});
    }
    {
      policy::PolicyModel m = *in.behavior;
      train::train_tf_top(m, sub, *in.val, filter, cfg);
      out.push_back({"tf_top", f, greedy_reward(m, *in.test, *in.reward, *in.vocab, std::nullopt, false, in.max_len),
                     train::filter_top(sub, filter).size()});
    }
  }
  return out;
}

}  // namespace offrl::eval
