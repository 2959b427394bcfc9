#pragma once

// Offline datasets of reward-annotated responses, the return filter and the
// return quantizer.

#include "offrl/corpus/corpus.hpp"
#include "offrl/policy/policy.hpp"
#include "offrl/rewards/rewards.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace offrl::train {

using corpus::TokenIds;

enum class Source { human, model };

struct OfflineRecord {
  std::string conversation_id;
  int turn_index = 0;
  TokenIds context;
  TokenIds response;
  double reward = 0.0;
  Source source = Source::human;
  int sample_index = 0;    // 0 for the human record, 1..n for samples
  bool truncated = false;  // response hit the horizon without EOS

  bool operator==(const OfflineRecord&) const = default;
};

struct OfflineDataset {
  std::vector<OfflineRecord> records;
  // behavior checkpoint hash, reward spec, samples per context, vocab hash...
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  /// Sorts into the canonical order: conversation, turn, human first, sample index.
  void canonicalize();
  /// Throws unless rewards lie in [0, 1] and every context has a human record.
  void validate() const;
  /// Records grouped by context, in canonical order.
  std::vector<std::vector<const OfflineRecord*>> groups() const;
  std::vector<double> rewards() const;

  /// JSON Lines: a {"provenance": ...} header, then one record per line.
  void save(const std::filesystem::path& path) const;
  static OfflineDataset load(const std::filesystem::path& path);
};

/// Per context: the human response (scored like any other) plus n_model
/// responses sampled from the behavior policy. Duplicates are kept.
struct OfflineGenConfig {
  int n_model = 5;
  policy::DecodeConfig decode = {policy::DecodeConfig::Mode::sample, 1.0, 0, 16, 1, false};
  unsigned long long seed = 0;
};

OfflineDataset generate_offline_dataset(const policy::PolicyModel& behavior,
                                        const std::vector<corpus::ContextResponsePair>& pairs,
                                        const rewards::RewardModel& reward, const corpus::Vocab& vocab,
                                        const OfflineGenConfig& cfg);

/// Keeps records whose return is at least 1 - delta. The threshold is either
/// given directly or derived from the q-quantile of the dataset's returns.
struct TopFilterConfig {
  std::optional<double> delta;
  std::optional<double> quantile;
  // Keep only human records regardless of the threshold (the top end of the
  // threshold sweep).
  bool human_only = false;

  void validate() const;
  /// The return threshold 1 - delta for this dataset.
  double threshold(const std::vector<double>& returns) const;
};

/// Lower-interpolated empirical quantile (q = 0 gives the minimum, q = 1 the maximum).
double empirical_quantile(std::vector<double> values, double q);

OfflineDataset filter_top(const OfflineDataset& data, const TopFilterConfig& cfg);

/// K bins over [0, 1]; bin k is [edges[k], edges[k+1]) and the top bin is
/// closed on the right.
class BinQuantizer {
 public:
  explicit BinQuantizer(int k);  // uniform edges
  explicit BinQuantizer(std::vector<double> edges);

  int num_bins() const { return static_cast<int>(edges_.size()) - 1; }
  const std::vector<double>& edges() const { return edges_; }
  int bin(double r) const;
  int top_bin() const { return num_bins() - 1; }

 private:
  std::vector<double> edges_;
};

/// Token id of the bin holding r. Throws if r lies outside [0, 1].
int quantize_return(double r, const BinQuantizer& q, const corpus::Vocab& vocab);

/// Subsample whole context groups: keeps round(fraction * groups) of them,
/// chosen by a seeded shuffle and returned in canonical order.
OfflineDataset subsample_contexts(const OfflineDataset& data, double fraction, unsigned long long seed);

}  // namespace offrl::train
