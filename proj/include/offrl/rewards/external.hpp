#pragma once

// Bridge to an external similarity scorer running as a child process.
//
// Wire protocol, per batch: the parent writes one JSON object per line,
//   {"id": int, "generated": string, "target": string}
// followed by a blank line. The child answers one line per input,
//   {"id": int, "score": float}
// in any order. Ids must match the batch exactly. Scores outside [0, 1] are
// clamped with a warning on stderr.

#include <string>
#include <utility>
#include <vector>

namespace offrl::rewards {

using TextPair = std::pair<std::string, std::string>;  // (generated, target)

class ExternalScorer {
 public:
  /// Launches `cmd` through /bin/sh.
  explicit ExternalScorer(std::string cmd);
  ~ExternalScorer();
  ExternalScorer(const ExternalScorer&) = delete;
  ExternalScorer& operator=(const ExternalScorer&) = delete;

  /// One score per input, in input order.
  std::vector<double> score(const std::vector<TextPair>& batch);

  long long batches_sent() const { return batch_index_; }

 private:
  [[noreturn]] void fail(const std::string& what);
  void shutdown();

  std::string cmd_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string pending_;  // bytes read past the last complete line
  long long batch_index_ = 0;
};

/// Convenience wrapper: one child process for one batch.
std::vector<double> external_score(const std::vector<TextPair>& batch, const std::string& scorer_cmd);

}  // namespace offrl::rewards
