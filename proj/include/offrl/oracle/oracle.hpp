#pragma once

// Exact reference computations for small, enumerable problems. This library
// shares no numerical code with the trainers so the two can check each other.

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace offrl::oracle {

using Prefix = std::vector<int>;

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Prefix-keyed tree MDP. Each internal node lists its actions; an action
/// whose child is not itself an internal node ends the episode and must have
/// a terminal reward. Rewards are paid only on terminal transitions.
struct TreeMDP {
  int vocab_size = 0;
  std::map<Prefix, std::vector<int>> children;
  std::map<Prefix, double> leaf_reward;
  // Optional behavior distribution per internal node, aligned with children.
  std::map<Prefix, std::vector<double>> behavior;
  double gamma = 1.0;

  /// Longest root-to-leaf action count.
  int depth() const;
  /// Every terminal prefix in lexicographic order.
  std::vector<Prefix> leaves() const;

  static TreeMDP from_json(const nlohmann::json& j);
  static TreeMDP load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

struct TreeSolution {
  std::map<std::pair<Prefix, int>, double> q;  // Q*(s, a)
  std::map<Prefix, double> v;                  // V*(s) for internal nodes
  /// argmax_a Q*(s, a); ties go to the lowest token id.
  int best_action(const Prefix& s) const;
};

/// Backward induction: Q*(s,a) = r(s,a) + gamma * V*(s'), V*(s) = max_a Q*(s,a),
/// V = 0 after a terminal transition. Throws if any leaf lacks a reward.
TreeSolution tree_dp(const TreeMDP& mdp, double gamma);

/// A response sampled for some context, with its scalar return.
struct ScoredSequence {
  std::vector<int> context;
  std::vector<int> response;
  double reward = 0.0;
};

/// Bin of r under edges e_0 = 0 < ... < e_K = 1, bins [e_k, e_{k+1}) with the
/// top bin closed on the right.
int bin_of(double r, const std::vector<double>& edges);

struct ConditionalKey {
  std::vector<int> context;
  std::vector<int> prefix;
  int bin = 0;
  auto operator<=>(const ConditionalKey&) const = default;
};

/// Counting estimate of p(next token | context, response prefix, return bin).
/// Only (context, prefix, bin) states present in the data appear; lookups of
/// absent states report that explicitly instead of yielding zeros.
class EmpiricalConditional {
 public:
  EmpiricalConditional(const std::vector<ScoredSequence>& data, const std::vector<double>& edges);

  bool contains(const ConditionalKey& key) const { return table_.count(key) != 0; }
  /// Next-token distribution; throws OracleError for states not in the data.
  const std::map<int, double>& at(const ConditionalKey& key) const;
  const std::map<ConditionalKey, std::map<int, double>>& table() const { return table_; }

 private:
  std::map<ConditionalKey, std::map<int, double>> table_;
};

/// The tau-expectile: the unique v with tau * sum (x - v)_+ = (1 - tau) * sum (v - x)_+,
/// found by bisection to 1e-9.
double expectile(const std::vector<double>& samples, double tau);

/// E[max reward over n i.i.d. draws] from a finite response distribution,
/// computed exactly from the order statistics over distinct reward levels.
/// Throws if the response set exceeds `max_responses`.
double best_of_n_expectation(const std::vector<double>& probs, const std::vector<double>& rewards, int n,
                             std::size_t max_responses = 1000000);

}  // namespace offrl::oracle
