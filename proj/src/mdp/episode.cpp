#include "offrl/mdp/episode.hpp"

#include <cmath>
#include <stdexcept>

namespace offrl::mdp {

void HorizonConfig::validate() const {
  if (max_len < 1) throw std::invalid_argument("horizon T must be at least 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
}

bool is_terminal(const EpisodeState& s, int eos, int horizon) {
  return (!s.prefix.empty() && s.prefix.back() == eos) || s.t >= horizon;
}

StepResult step(const EpisodeState& s, int action, int eos, int horizon) {
  if (is_terminal(s, eos, horizon)) throw std::logic_error("step() on a terminal state");
  StepResult r;
  r.next.context = s.context;
  r.next.prefix = s.prefix;
  r.next.prefix.push_back(action);
  r.next.t = s.t + 1;
  r.done = action == eos || r.next.t >= horizon;
  return r;
}

std::vector<Transition> episode_from_pair(const corpus::ContextResponsePair& pair, const RewardFn& reward_fn,
                                          int horizon, int eos) {
  if (static_cast<int>(pair.response.size()) > horizon) {
    throw std::invalid_argument("response of " + std::to_string(pair.response.size()) +
                                " tokens exceeds horizon " + std::to_string(horizon));
  }
  std::vector<Transition> out;
  EpisodeState s;
  s.context = pair.context;
  for (std::size_t i = 0; i < pair.response.size(); ++i) {
    Transition tr;
    tr.state = s;
    tr.action = pair.response[i];
    StepResult r = step(s, tr.action, eos, horizon);
    tr.next = r.next;
    tr.done = r.done || i + 1 == pair.response.size();
    out.push_back(std::move(tr));
    s = std::move(r.next);
    if (out.back().done) break;
  }
  if (!out.empty()) out.back().reward = reward_fn(pair.response, pair);
  return out;
}

std::vector<double> discounted_returns(double terminal_reward, std::size_t steps, double gamma) {
  std::vector<double> out(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    out[t] = std::pow(gamma, static_cast<double>(steps - 1 - t)) * terminal_reward;
  }
  return out;
}

std::vector<ReturnAnnotatedSequence> annotate_returns(const std::vector<corpus::ContextResponsePair>& sequences,
                                                      const RewardFn& reward_fn, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
  std::vector<ReturnAnnotatedSequence> out;
  out.reserve(sequences.size());
  for (const auto& p : sequences) {
    ReturnAnnotatedSequence r;
    r.pair = p;
    r.terminal_reward = reward_fn(p.response, p);
    r.returns = discounted_returns(r.terminal_reward, p.response.size(), gamma);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace offrl::mdp
