#pragma once

// Token-level MDP over a response: state = context + generated prefix,
// action = next token, deterministic transitions, terminal reward only.

#include "offrl/corpus/corpus.hpp"

#include <functional>
#include <vector>

namespace offrl::mdp {

using corpus::TokenIds;

struct HorizonConfig {
  int max_len = 16;    // T
  double gamma = 1.0;  // discount in (0, 1]

  void validate() const;
};

struct EpisodeState {
  TokenIds context;
  TokenIds prefix;
  int t = 0;  // == prefix.size()
};

struct Transition {
  EpisodeState state;
  int action = 0;
  double reward = 0.0;
  EpisodeState next;
  bool done = false;
};

/// Scores a generated response (token ids, EOS allowed) against a target.
using RewardFn = std::function<double(const TokenIds& generated, const corpus::ContextResponsePair& target)>;

bool is_terminal(const EpisodeState& s, int eos, int horizon);

struct StepResult {
  EpisodeState next;
  bool done = false;
};

/// Appends `action`; done iff it is EOS or the horizon is reached.
StepResult step(const EpisodeState& s, int action, int eos, int horizon);

/// Rolls the pair's own response through the MDP. Only the last transition
/// is terminal and carries reward_fn(response, pair).
std::vector<Transition> episode_from_pair(const corpus::ContextResponsePair& pair, const RewardFn& reward_fn,
                                          int horizon, int eos);

struct ReturnAnnotatedSequence {
  corpus::ContextResponsePair pair;
  double terminal_reward = 0.0;
  // Per-step return gamma^(T_end - t) * r_terminal, t = 0..|response|-1.
  std::vector<double> returns;

  /// Sequence-level return (the value at the first step).
  double value() const { return returns.empty() ? 0.0 : returns.front(); }
};

/// Discounted per-step returns of terminal-reward sequences.
std::vector<double> discounted_returns(double terminal_reward, std::size_t steps, double gamma);

std::vector<ReturnAnnotatedSequence> annotate_returns(const std::vector<corpus::ContextResponsePair>& sequences,
                                                      const RewardFn& reward_fn, double gamma);

}  // namespace offrl::mdp
