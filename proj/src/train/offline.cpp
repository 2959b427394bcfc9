#include "offrl/train/offline.hpp"

#include "offrl/util/hash.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace offrl::train {

namespace {

auto order_key(const OfflineRecord& r) {
  return std::make_tuple(std::cref(r.conversation_id), r.turn_index, r.source == Source::human ? 0 : 1,
                         r.sample_index);
}

bool same_context(const OfflineRecord& a, const OfflineRecord& b) {
  return a.conversation_id == b.conversation_id && a.turn_index == b.turn_index;
}

nlohmann::json record_to_json(const OfflineRecord& r) {
  return {{"conversation", r.conversation_id},
          {"turn", r.turn_index},
          {"source", r.source == Source::human ? "human" : "model"},
          {"sample", r.sample_index},
          {"reward", r.reward},
          {"truncated", r.truncated},
          {"context", r.context},
          {"response", r.response}};
}

OfflineRecord record_from_json(const nlohmann::json& j) {
  OfflineRecord r;
  r.conversation_id = j.at("conversation").get<std::string>();
  r.turn_index = j.at("turn").get<int>();
  const std::string src = j.at("source").get<std::string>();
  if (src == "human") {
    r.source = Source::human;
  } else if (src == "model") {
    r.source = Source::model;
  } else {
    throw std::runtime_error("unknown record source \"" + src + "\"");
  }
  r.sample_index = j.at("sample").get<int>();
  r.reward = j.at("reward").get<double>();
  r.truncated = j.value("truncated", false);
  r.context = j.at("context").get<TokenIds>();
  r.response = j.at("response").get<TokenIds>();
  return r;
}

}  // namespace

void OfflineDataset::canonicalize() {
  std::stable_sort(records.begin(), records.end(),
                   [](const OfflineRecord& a, const OfflineRecord& b) { return order_key(a) < order_key(b); });
}

void OfflineDataset::validate() const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!(r.reward >= 0.0 && r.reward <= 1.0)) {
      throw std::runtime_error("record " + std::to_string(i) + " has reward " + std::to_string(r.reward) +
                               " outside [0, 1]");
    }
  }
  for (const auto& g : groups()) {
    const bool has_human =
        std::any_of(g.begin(), g.end(), [](const OfflineRecord* r) { return r->source == Source::human; });
    if (!has_human) {
      throw std::runtime_error("context " + g.front()->conversation_id + "#" + std::to_string(g.front()->turn_index) +
                               " has no human record");
    }
  }
}

std::vector<std::vector<const OfflineRecord*>> OfflineDataset::groups() const {
  std::vector<const OfflineRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const OfflineRecord* a, const OfflineRecord* b) { return order_key(*a) < order_key(*b); });
  std::vector<std::vector<const OfflineRecord*>> out;
  for (const auto* r : sorted) {
    if (out.empty() || !same_context(*out.back().front(), *r)) out.emplace_back();
    out.back().push_back(r);
  }
  return out;
}

std::vector<double> OfflineDataset::rewards() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.reward);
  return out;
}

void OfflineDataset::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json{{"format", "offrl-offline"}, {"version", 1}, {"records", records.size()}, {"provenance", provenance}}
             .dump()
      << '\n';
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

OfflineDataset OfflineDataset::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  OfflineDataset d;
  std::string line;
  int lineno = 0;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (lineno == 1) {
        if (j.value("format", std::string()) != "offrl-offline") throw std::runtime_error("missing dataset header");
        expected = j.at("records").get<std::size_t>();
        d.provenance = j.at("provenance");
        continue;
      }
      d.records.push_back(record_from_json(j));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (lineno == 0) throw std::runtime_error(path.string() + ": empty dataset file");
  if (d.records.size() != expected) {
    throw std::runtime_error(path.string() + ": header announces " + std::to_string(expected) + " records, found " +
                             std::to_string(d.records.size()));
  }
  return d;
}

OfflineDataset generate_offline_dataset(const policy::PolicyModel& behavior,
                                        const std::vector<corpus::ContextResponsePair>& pairs,
                                        const rewards::RewardModel& reward, const corpus::Vocab& vocab,
                                        const OfflineGenConfig& cfg) {
  if (cfg.n_model < 0) throw std::invalid_argument("n_model must be nonnegative");
  policy::DecodeConfig decode = cfg.decode;
  decode.n = std::max(1, cfg.n_model);
  decode.validate();

  OfflineDataset d;
  std::vector<TokenIds> responses;
  std::vector<const corpus::ContextResponsePair*> targets;
  for (const auto& p : pairs) {
    OfflineRecord human;
    human.conversation_id = p.conversation_id;
    human.turn_index = p.turn_index;
    human.context = p.context;
    human.response = p.response;
    human.source = Source::human;
    d.records.push_back(human);
    responses.push_back(p.response);
    targets.push_back(&p);
    if (cfg.n_model == 0) continue;
    // Seeding per context keeps each context's samples independent of the
    // rest of the pair list.
    std::mt19937_64 rng(util::derive_seed(cfg.seed, p.conversation_id + "#" + std::to_string(p.turn_index)));
    const auto samples = policy::sample_responses(behavior, p.context, decode, std::nullopt, vocab, rng);
    for (int k = 0; k < cfg.n_model; ++k) {
      OfflineRecord r;
      r.conversation_id = p.conversation_id;
      r.turn_index = p.turn_index;
      r.context = p.context;
      r.response = samples[static_cast<std::size_t>(k)];
      r.source = Source::model;
      r.sample_index = k + 1;
      r.truncated = r.response.empty() || r.response.back() != vocab.eos();
      d.records.push_back(std::move(r));
      responses.push_back(d.records.back().response);
      targets.push_back(&p);
    }
  }
  const auto scores = reward.rewards(responses, targets);
  for (std::size_t i = 0; i < scores.size(); ++i) d.records[i].reward = scores[i];
  d.canonicalize();
  d.provenance = {{"reward", reward.spec().to_json()}, {"n_model", cfg.n_model}, {"vocab", vocab.hash()},
                  {"seed", cfg.seed}};
  return d;
}

void TopFilterConfig::validate() const {
  if (human_only) return;
  if (delta.has_value() == quantile.has_value()) {
    throw std::invalid_argument("top filter needs exactly one of delta and quantile");
  }
  if (delta && !(*delta >= 0.0 && *delta <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
  if (quantile && !(*quantile >= 0.0 && *quantile <= 1.0)) throw std::invalid_argument("quantile must lie in [0, 1]");
}

double TopFilterConfig::threshold(const std::vector<double>& returns) const {
  validate();
  if (delta) return 1.0 - *delta;
  if (quantile) return empirical_quantile(returns, *quantile);
  return 0.0;
}

double empirical_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
  return values[idx];
}

OfflineDataset filter_top(const OfflineDataset& data, const TopFilterConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("filter_top on an empty dataset");
  OfflineDataset out;
  out.provenance = data.provenance;
  if (cfg.human_only) {
    for (const auto& r : data.records) {
      if (r.source == Source::human) out.records.push_back(r);
    }
    out.provenance["filter"] = {{"human_only", true}};
  } else {
    const double thr = cfg.threshold(data.rewards());
    for (const auto& r : data.records) {
      if (r.reward >= thr) out.records.push_back(r);
    }
    if (out.empty()) {
      std::ostringstream os;
      os << "no records with return >= " << thr << "; lower the threshold (raise delta or lower the quantile)";
      throw std::runtime_error(os.str());
    }
    out.provenance["filter"] = {{"threshold", thr}};
  }
  if (out.empty()) throw std::runtime_error("filter kept no records");
  return out;
}

BinQuantizer::BinQuantizer(int k) {
  if (k < 1) throw std::invalid_argument("bin count must be at least 1");
  for (int i = 0; i <= k; ++i) edges_.push_back(static_cast<double>(i) / k);
  edges_.back() = 1.0;
}

BinQuantizer::BinQuantizer(std::vector<double> edges) : edges_(std::move(edges)) {
  if (edges_.size() < 2) throw std::invalid_argument("need at least two bin edges");
  if (edges_.front() != 0.0 || edges_.back() != 1.0) throw std::invalid_argument("bin edges must start at 0 and end at 1");
  for (std::size_t i = 1; i < edges_.size(); ++i) {
    if (!(edges_[i] > edges_[i - 1])) throw std::invalid_argument("bin edges must be strictly increasing");
  }
}

int BinQuantizer::bin(double r) const {
  if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("return " + std::to_string(r) + " outside [0, 1]");
  const auto it = std::upper_bound(edges_.begin(), edges_.end(), r);
  const int b = static_cast<int>(it - edges_.begin()) - 1;
  return std::min(b, top_bin());
}

int quantize_return(double r, const BinQuantizer& q, const corpus::Vocab& vocab) {
  if (q.num_bins() != vocab.num_bins()) {
    throw std::invalid_argument("quantizer has " + std::to_string(q.num_bins()) + " bins but the vocabulary has " +
                                std::to_string(vocab.num_bins()));
  }
  return vocab.bin(q.bin(r));
}

OfflineDataset subsample_contexts(const OfflineDataset& data, double fraction, unsigned long long seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  auto groups = data.groups();
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(groups.size())));
  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::max<std::size_t>(1, keep));
  std::sort(order.begin(), order.end());
  OfflineDataset out;
  out.provenance = data.provenance;
  out.provenance["fraction"] = fraction;
  for (std::size_t i : order) {
    for (const auto* r : groups[i]) out.records.push_back(*r);
  }
  return out;
}

}  // namespace offrl::train
