#include "offrl/oracle/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

namespace offrl::oracle {

namespace {

std::string prefix_string(const Prefix& p) {
  std::string s = "[";
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(p[i]);
  }
  return s + "]";
}

}  // namespace

int TreeMDP::depth() const {
  int d = 0;
  for (const auto& [p, _] : leaf_reward) d = std::max(d, static_cast<int>(p.size()));
  return d;
}

std::vector<Prefix> TreeMDP::leaves() const {
  std::vector<Prefix> out;
  for (const auto& [p, _] : leaf_reward) out.push_back(p);
  return out;
}

TreeMDP TreeMDP::from_json(const nlohmann::json& j) {
  TreeMDP m;
  m.vocab_size = j.at("vocab_size").get<int>();
  m.gamma = j.value("gamma", 1.0);
  if (m.vocab_size < 1 || m.vocab_size > 8) throw OracleError("tree vocab_size must be in [1, 8]");
  for (const auto& n : j.at("nodes")) {
    Prefix p = n.at("prefix").get<Prefix>();
    std::vector<int> acts = n.at("actions").get<std::vector<int>>();
    for (int a : acts) {
      if (a < 0 || a >= m.vocab_size) throw OracleError("action " + std::to_string(a) + " outside the tree vocabulary");
    }
    if (n.contains("behavior")) {
      auto b = n["behavior"].get<std::vector<double>>();
      if (b.size() != acts.size()) throw OracleError("behavior at " + prefix_string(p) + " does not match its actions");
      m.behavior[p] = std::move(b);
    }
    if (!m.children.emplace(p, std::move(acts)).second) throw OracleError("duplicate node " + prefix_string(p));
  }
  for (const auto& l : j.at("leaves")) {
    m.leaf_reward[l.at("prefix").get<Prefix>()] = l.at("reward").get<double>();
  }
  if (!m.children.count({})) throw OracleError("tree has no root node");
  return m;
}

TreeMDP TreeMDP::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw OracleError("cannot open tree fixture " + path.string());
  return from_json(nlohmann::json::parse(in));
}

nlohmann::json TreeMDP::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [p, acts] : children) {
    nlohmann::json n = {{"prefix", p}, {"actions", acts}};
    if (auto it = behavior.find(p); it != behavior.end()) n["behavior"] = it->second;
    nodes.push_back(n);
  }
  nlohmann::json leaves = nlohmann::json::array();
  for (const auto& [p, r] : leaf_reward) leaves.push_back({{"prefix", p}, {"reward", r}});
  return {{"vocab_size", vocab_size}, {"gamma", gamma}, {"nodes", nodes}, {"leaves", leaves}};
}

int TreeSolution::best_action(const Prefix& s) const {
  int best = -1;
  double best_q = 0.0;
  for (auto it = q.lower_bound({s, -1}); it != q.end() && it->first.first == s; ++it) {
    if (best < 0 || it->second > best_q) {
      best = it->first.second;
      best_q = it->second;
    }
  }
  if (best < 0) throw OracleError("no actions at state " + prefix_string(s));
  return best;
}

TreeSolution tree_dp(const TreeMDP& mdp, double gamma) {
  TreeSolution sol;
  std::function<double(const Prefix&)> solve = [&](const Prefix& s) -> double {
    const auto& acts = mdp.children.at(s);
    if (acts.empty()) throw OracleError("internal node " + prefix_string(s) + " has no actions");
    double best = -std::numeric_limits<double>::infinity();
    for (int a : acts) {
      Prefix next = s;
      next.push_back(a);
      double qv;
      if (mdp.children.count(next)) {
        qv = gamma * solve(next);
      } else {
        auto it = mdp.leaf_reward.find(next);
        if (it == mdp.leaf_reward.end()) throw OracleError("missing leaf reward at " + prefix_string(next));
        qv = it->second;
      }
      sol.q[{s, a}] = qv;
      best = std::max(best, qv);
    }
    sol.v[s] = best;
    return best;
  };
  solve({});
  return sol;
}

int bin_of(double r, const std::vector<double>& edges) {
  if (edges.size() < 2) throw OracleError("need at least two bin edges");
  if (r < edges.front() || r > edges.back()) throw OracleError("return outside the bin range");
  const int k = static_cast<int>(edges.size()) - 1;
  for (int b = 0; b < k - 1; ++b) {
    if (r < edges[static_cast<std::size_t>(b) + 1]) return b;
  }
  return k - 1;
}

EmpiricalConditional::EmpiricalConditional(const std::vector<ScoredSequence>& data, const std::vector<double>& edges) {
  std::map<ConditionalKey, std::map<int, long>> counts;
  for (const auto& s : data) {
    ConditionalKey key{s.context, {}, bin_of(s.reward, edges)};
    for (int tok : s.response) {
      ++counts[key][tok];
      key.prefix.push_back(tok);
    }
  }
  for (const auto& [key, c] : counts) {
    long total = 0;
    for (const auto& [_, n] : c) total += n;
    auto& dist = table_[key];
    for (const auto& [tok, n] : c) dist[tok] = static_cast<double>(n) / static_cast<double>(total);
  }
}

const std::map<int, double>& EmpiricalConditional::at(const ConditionalKey& key) const {
  auto it = table_.find(key);
  if (it == table_.end()) {
    throw OracleError("state (prefix " + prefix_string(key.prefix) + ", bin " + std::to_string(key.bin) +
                      ") does not occur in the data");
  }
  return it->second;
}

double expectile(const std::vector<double>& samples, double tau) {
  if (samples.empty()) throw OracleError("expectile of an empty sample set");
  if (!(tau > 0.0 && tau < 1.0)) throw OracleError("tau must lie in (0, 1)");
  double lo = *std::min_element(samples.begin(), samples.end());
  double hi = *std::max_element(samples.begin(), samples.end());
  auto balance = [&](double v) {
    double above = 0.0;
    double below = 0.0;
    for (double x : samples) {
      if (x > v) above += x - v;
      else below += v - x;
    }
    return tau * above - (1.0 - tau) * below;
  };
  while (hi - lo > 1e-9) {
    const double mid = 0.5 * (lo + hi);
    if (balance(mid) > 0.0) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

double best_of_n_expectation(const std::vector<double>& probs, const std::vector<double>& rewards, int n,
                             std::size_t max_responses) {
  if (probs.size() != rewards.size()) throw OracleError("probs and rewards differ in length");
  if (probs.empty()) throw OracleError("empty response set");
  if (probs.size() > max_responses) throw OracleError("response set exceeds the enumeration cap");
  if (n < 1) throw OracleError("n must be at least 1");
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw OracleError("probabilities do not sum to 1");
  std::map<double, double> mass;  // reward level -> probability
  for (std::size_t i = 0; i < probs.size(); ++i) mass[rewards[i]] += probs[i];
  double cdf_prev = 0.0;
  double out = 0.0;
  for (const auto& [r, p] : mass) {
    const double cdf = std::min(1.0, cdf_prev + p);
    out += r * (std::pow(cdf, n) - std::pow(cdf_prev, n));
    cdf_prev = cdf;
  }
  return out;
}

}  // namespace offrl::oracle
