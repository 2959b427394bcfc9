#include "offrl/policy/policy.hpp"

#include "offrl/nn/ops.hpp"
#include "offrl/nn/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace offrl::policy {

using nn::Tape;
using nn::Var;

namespace {

std::string_view backbone_name(Backbone b) { return b == Backbone::attention ? "attention" : "gru"; }

Matrix random_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (nn::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

std::string layer_prefix(int l) { return "lm.l" + std::to_string(l) + "."; }

}  // namespace

void CausalLMConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be at least 2");
  if (dim < 1 || layers < 1 || heads < 1 || block < 2) throw std::invalid_argument("model dimensions must be positive");
  if (backbone == Backbone::attention && dim % heads != 0) {
    throw std::invalid_argument("dim must be divisible by heads");
  }
}

nlohmann::json CausalLMConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"dim", dim},
          {"layers", layers},         {"heads", heads},
          {"block", block},           {"backbone", backbone_name(backbone)},
          {"zero_init_head", zero_init_head}, {"init_std", init_std}};
}

CausalLMConfig CausalLMConfig::from_json(const nlohmann::json& j) {
  CausalLMConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.block = j.value("block", c.block);
  const std::string b = j.value("backbone", std::string("attention"));
  if (b == "attention") {
    c.backbone = Backbone::attention;
  } else if (b == "gru") {
    c.backbone = Backbone::gru;
  } else {
    throw std::invalid_argument("unknown backbone \"" + b + "\"");
  }
  c.zero_init_head = j.value("zero_init_head", c.zero_init_head);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

// ---------------------------------------------------------------- model

PolicyModel::PolicyModel(const CausalLMConfig& cfg, unsigned long long seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.dim;
  const int v = cfg_.vocab_size;
  const double s = cfg_.init_std;
  const double lin = 1.0 / std::sqrt(static_cast<double>(d));
  params_.add("lm.tok_emb", random_matrix(v, d, s, rng));
  if (cfg_.backbone == Backbone::attention) {
    params_.add("lm.pos_emb", random_matrix(cfg_.block, d, s, rng));
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = layer_prefix(l);
      params_.add(p + "ln1.g", Matrix::Ones(1, d));
      params_.add(p + "ln1.b", Matrix::Zero(1, d));
      params_.add(p + "attn.Wqkv", random_matrix(d, 3 * d, lin, rng));
      params_.add(p + "attn.bqkv", Matrix::Zero(1, 3 * d));
      params_.add(p + "attn.Wo", random_matrix(d, d, lin / std::sqrt(2.0 * cfg_.layers), rng));
      params_.add(p + "attn.bo", Matrix::Zero(1, d));
      params_.add(p + "ln2.g", Matrix::Ones(1, d));
      params_.add(p + "ln2.b", Matrix::Zero(1, d));
      params_.add(p + "mlp.W1", random_matrix(d, 4 * d, lin, rng));
      params_.add(p + "mlp.b1", Matrix::Zero(1, 4 * d));
      params_.add(p + "mlp.W2", random_matrix(4 * d, d, 0.5 * lin / std::sqrt(2.0 * cfg_.layers), rng));
      params_.add(p + "mlp.b2", Matrix::Zero(1, d));
    }
  } else {
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = layer_prefix(l);
      params_.add(p + "gru.Wx", random_matrix(d, 3 * d, lin, rng));
      params_.add(p + "gru.bx", Matrix::Zero(1, 3 * d));
      params_.add(p + "gru.Uh", random_matrix(d, 3 * d, lin, rng));
      params_.add(p + "gru.bh", Matrix::Zero(1, 3 * d));
    }
  }
  params_.add("lm.lnf.g", Matrix::Ones(1, d));
  params_.add("lm.lnf.b", Matrix::Zero(1, d));
  params_.add("lm.head.W", cfg_.zero_init_head ? Matrix::Zero(d, v) : random_matrix(d, v, lin, rng));
  params_.add("lm.head.b", Matrix::Zero(1, v));
}

void PolicyModel::init_mlp_head(const std::string& prefix, int out, std::mt19937_64& rng) {
  const int d = cfg_.dim;
  params_.add(prefix + "W1", random_matrix(d, 2 * d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  params_.add(prefix + "b1", Matrix::Zero(1, 2 * d));
  // Zero final layer: a fresh head outputs exactly 0.
  params_.add(prefix + "W2", Matrix::Zero(2 * d, out));
  params_.add(prefix + "b2", Matrix::Zero(1, out));
}

void PolicyModel::add_ilql_heads(const ILQLHeadsConfig& cfg, unsigned long long seed) {
  if (ilql_) throw std::logic_error("ILQL heads already present");
  std::mt19937_64 rng(seed);
  init_mlp_head("ilql.q.", cfg_.vocab_size, rng);
  init_mlp_head("ilql.v.", 1, rng);
  if (cfg.target_v) {
    for (const char* n : {"W1", "b1", "W2", "b2"}) {
      params_.add(std::string("ilql.vt.") + n, params_.at(std::string("ilql.v.") + n).value, false);
    }
  }
  ilql_ = cfg;
}

const ILQLHeadsConfig& PolicyModel::ilql_config() const {
  if (!ilql_) throw std::logic_error("model has no ILQL heads");
  return *ilql_;
}

ILQLHeadsConfig& PolicyModel::ilql_config() {
  if (!ilql_) throw std::logic_error("model has no ILQL heads");
  return *ilql_;
}

void PolicyModel::update_target_v() {
  const auto& c = ilql_config();
  if (!c.target_v) return;
  for (const char* n : {"W1", "b1", "W2", "b2"}) {
    auto& tgt = params_.at(std::string("ilql.vt.") + n).value;
    const auto& src = params_.at(std::string("ilql.v.") + n).value;
    tgt = c.polyak * src + (1.0 - c.polyak) * tgt;
  }
}

void PolicyModel::add_value_head(unsigned long long seed) {
  if (value_head_) throw std::logic_error("value head already present");
  std::mt19937_64 rng(seed);
  init_mlp_head("ppo.value.", 1, rng);
  value_head_ = true;
}

void PolicyModel::set_backbone_trainable(bool trainable) { params_.set_trainable_prefix("lm.", trainable); }

template <class Self>
Var PolicyModel::hidden_impl(Self& self, Tape& t, std::span<const int> tokens) {
  const auto& cfg = self.cfg_;
  auto& ps = self.params_;
  const auto n = static_cast<nn::Index>(tokens.size());
  if (n == 0) throw std::invalid_argument("forward pass on an empty sequence");
  if (n > cfg.block) {
    throw std::invalid_argument("sequence of " + std::to_string(n) + " tokens exceeds block length " +
                                std::to_string(cfg.block));
  }
  const int d = cfg.dim;
  Var x = nn::embed(t.param(ps.at("lm.tok_emb")), tokens);
  if (cfg.backbone == Backbone::attention) {
    x = nn::add(x, nn::slice_rows(t.param(ps.at("lm.pos_emb")), 0, n));
    const int hd = d / cfg.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = layer_prefix(l);
      Var h = nn::layer_norm(x, t.param(ps.at(p + "ln1.g")), t.param(ps.at(p + "ln1.b")));
      Var qkv = nn::add_row(nn::matmul(h, t.param(ps.at(p + "attn.Wqkv"))), t.param(ps.at(p + "attn.bqkv")));
      std::vector<Var> heads;
      heads.reserve(static_cast<std::size_t>(cfg.heads));
      for (int k = 0; k < cfg.heads; ++k) {
        Var q = nn::slice_cols(qkv, k * hd, hd);
        Var kk = nn::slice_cols(qkv, d + k * hd, hd);
        Var v = nn::slice_cols(qkv, 2 * d + k * hd, hd);
        Var att = nn::causal_softmax(nn::scale(nn::matmul(q, nn::transpose(kk)), inv_sqrt));
        heads.push_back(nn::matmul(att, v));
      }
      Var merged = heads.size() == 1 ? heads.front() : nn::concat_cols(heads);
      x = nn::add(x, nn::add_row(nn::matmul(merged, t.param(ps.at(p + "attn.Wo"))), t.param(ps.at(p + "attn.bo"))));
      Var h2 = nn::layer_norm(x, t.param(ps.at(p + "ln2.g")), t.param(ps.at(p + "ln2.b")));
      Var m = nn::gelu(nn::add_row(nn::matmul(h2, t.param(ps.at(p + "mlp.W1"))), t.param(ps.at(p + "mlp.b1"))));
      x = nn::add(x, nn::add_row(nn::matmul(m, t.param(ps.at(p + "mlp.W2"))), t.param(ps.at(p + "mlp.b2"))));
    }
  } else {
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = layer_prefix(l);
      Var xw = nn::add_row(nn::matmul(x, t.param(ps.at(p + "gru.Wx"))), t.param(ps.at(p + "gru.bx")));
      Var uh = t.param(ps.at(p + "gru.Uh"));
      Var bh = t.param(ps.at(p + "gru.bh"));
      Var h = t.constant(Matrix::Zero(1, d));
      std::vector<Var> outs;
      outs.reserve(static_cast<std::size_t>(n));
      for (nn::Index i = 0; i < n; ++i) {
        Var xr = nn::slice_rows(xw, i, 1);
        Var hu = nn::add(nn::matmul(h, uh), bh);
        Var z = nn::sigmoid(nn::add(nn::slice_cols(xr, 0, d), nn::slice_cols(hu, 0, d)));
        Var r = nn::sigmoid(nn::add(nn::slice_cols(xr, d, d), nn::slice_cols(hu, d, d)));
        Var cand = nn::tanh(nn::add(nn::slice_cols(xr, 2 * d, d), nn::mul(r, nn::slice_cols(hu, 2 * d, d))));
        h = nn::add(cand, nn::mul(z, nn::sub(h, cand)));
        outs.push_back(h);
      }
      Var seq = nn::concat_rows(outs);
      x = l == 0 ? seq : nn::add(x, seq);
    }
  }
  return nn::layer_norm(x, t.param(ps.at("lm.lnf.g")), t.param(ps.at("lm.lnf.b")));
}

template <class Self>
Var PolicyModel::mlp_head(Self& self, Tape& t, Var h, const std::string& prefix) {
  auto& ps = self.params_;
  Var a = nn::relu(nn::add_row(nn::matmul(h, t.param(ps.at(prefix + "W1"))), t.param(ps.at(prefix + "b1"))));
  return nn::add_row(nn::matmul(a, t.param(ps.at(prefix + "W2"))), t.param(ps.at(prefix + "b2")));
}

Var PolicyModel::hidden(Tape& t, std::span<const int> tokens) { return hidden_impl(*this, t, tokens); }
Var PolicyModel::hidden(Tape& t, std::span<const int> tokens) const { return hidden_impl(*this, t, tokens); }

Var PolicyModel::lm_logits(Tape& t, Var h) {
  return nn::add_row(nn::matmul(h, t.param(params_.at("lm.head.W"))), t.param(params_.at("lm.head.b")));
}
Var PolicyModel::lm_logits(Tape& t, Var h) const {
  return nn::add_row(nn::matmul(h, t.param(params_.at("lm.head.W"))), t.param(params_.at("lm.head.b")));
}

Var PolicyModel::q_values(Tape& t, Var h) {
  ilql_config();
  return mlp_head(*this, t, h, "ilql.q.");
}
Var PolicyModel::q_values(Tape& t, Var h) const {
  ilql_config();
  return mlp_head(*this, t, h, "ilql.q.");
}
Var PolicyModel::v_values(Tape& t, Var h) {
  ilql_config();
  return mlp_head(*this, t, h, "ilql.v.");
}
Var PolicyModel::v_values(Tape& t, Var h) const {
  ilql_config();
  return mlp_head(*this, t, h, "ilql.v.");
}
Var PolicyModel::target_v_values(Tape& t, Var h) const {
  return ilql_config().target_v ? mlp_head(*this, t, h, "ilql.vt.") : v_values(t, h);
}
Var PolicyModel::value_head(Tape& t, Var h) {
  if (!value_head_) throw std::logic_error("model has no value head");
  return mlp_head(*this, t, h, "ppo.value.");
}
Var PolicyModel::value_head(Tape& t, Var h) const {
  if (!value_head_) throw std::logic_error("model has no value head");
  return mlp_head(*this, t, h, "ppo.value.");
}

Matrix PolicyModel::logits(std::span<const int> tokens) const {
  Tape t(false);
  return lm_logits(t, hidden(t, tokens)).value();
}

nlohmann::json PolicyModel::to_json(bool with_optimizer) const {
  nlohmann::json j;
  j["config"] = cfg_.to_json();
  j["role"] = role == Role::behavior ? "behavior" : "learned";
  if (ilql_) {
    j["ilql"] = {{"eta", ilql_->eta}, {"target_v", ilql_->target_v}, {"polyak", ilql_->polyak}};
  }
  j["value_head"] = value_head_;
  j["store"] = nn::store_to_json(params_, with_optimizer);
  return j;
}

PolicyModel PolicyModel::from_json(const nlohmann::json& j) {
  PolicyModel m(CausalLMConfig::from_json(j.at("config")), 0);
  m.role = j.value("role", std::string("behavior")) == "behavior" ? Role::behavior : Role::learned;
  if (j.contains("ilql")) {
    ILQLHeadsConfig c;
    c.eta = j["ilql"].value("eta", c.eta);
    c.target_v = j["ilql"].value("target_v", c.target_v);
    c.polyak = j["ilql"].value("polyak", c.polyak);
    m.add_ilql_heads(c, 0);
  }
  if (j.value("value_head", false)) m.add_value_head(0);
  nn::store_from_json(m.params_, j.at("store"));
  return m;
}

// ---------------------------------------------------------------- scoring

Sequence make_sequence(std::span<const int> context, std::span<const int> response,
                       std::optional<int> condition_token) {
  Sequence s;
  s.tokens.assign(context.begin(), context.end());
  if (condition_token) s.tokens.push_back(*condition_token);
  s.response_start = static_cast<int>(s.tokens.size());
  s.tokens.insert(s.tokens.end(), response.begin(), response.end());
  return s;
}

std::vector<double> token_log_probs(const PolicyModel& model, std::span<const int> context,
                                    std::span<const int> response, std::optional<int> condition_token) {
  if (response.empty()) return {};
  const Sequence s = make_sequence(context, response, condition_token);
  if (s.response_start == 0) throw std::invalid_argument("log_prob needs a nonempty context");
  // The last token is never an input that predicts anything we score.
  const std::span<const int> inputs(s.tokens.data(), s.tokens.size() - 1);
  const Matrix lp = nn::log_softmax_rows(model.logits(inputs));
  std::vector<double> out(response.size());
  for (std::size_t i = 0; i < response.size(); ++i) {
    out[i] = lp(s.response_start - 1 + static_cast<nn::Index>(i), response[i]);
  }
  return out;
}

double log_prob(const PolicyModel& model, std::span<const int> context, std::span<const int> response,
                std::optional<int> condition_token) {
  double total = 0.0;
  for (double x : token_log_probs(model, context, response, condition_token)) total += x;
  return total;
}

double perplexity(const PolicyModel& model, const std::vector<corpus::ContextResponsePair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("perplexity over an empty pair set");
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& p : pairs) {
    for (double x : token_log_probs(model, p.context, p.response)) nll -= x;
    count += p.response.size();
  }
  if (count == 0) throw std::invalid_argument("perplexity over empty responses");
  return std::exp(nll / static_cast<double>(count));
}

ILQLValues ilql_values(const PolicyModel& model, std::span<const int> context, std::span<const int> response) {
  if (!model.has_ilql_heads()) throw std::logic_error("ilql_values: model has no ILQL heads");
  const Sequence s = make_sequence(context, response);
  Tape t(false);
  // State s_t ends at token index response_start - 1 + t.
  const auto first = static_cast<nn::Index>(s.response_start - 1);
  const auto steps = static_cast<nn::Index>(response.size());
  const std::span<const int> inputs(s.tokens.data(), s.tokens.size() - (response.empty() ? 0 : 1));
  Var h = model.hidden(t, inputs);
  Var hs = nn::slice_rows(h, first, steps);
  ILQLValues out;
  out.q = model.q_values(t, hs).value();
  const Matrix v = model.v_values(t, hs).value();
  out.v.assign(v.data(), v.data() + v.size());
  out.v.push_back(0.0);
  return out;
}

std::vector<double> implicit_policy_logits(const PolicyModel& model, std::span<const int> context,
                                           std::span<const int> prefix) {
  if (!model.has_ilql_heads()) throw std::logic_error("implicit_policy_logits: model has no ILQL heads");
  TokenIds tokens(context.begin(), context.end());
  tokens.insert(tokens.end(), prefix.begin(), prefix.end());
  Tape t(false);
  Var h = model.hidden(t, tokens);
  Var last = nn::slice_rows(h, h.rows() - 1, 1);
  const Matrix lp = nn::log_softmax_rows(model.lm_logits(t, last).value());
  const Matrix q = model.q_values(t, last).value();
  const double v = model.v_values(t, last).value()(0, 0);
  const double eta = model.ilql_config().eta;
  Matrix combined = lp.array() + eta * (q.array() - v);
  const Matrix out = nn::log_softmax_rows(combined);
  return {out.data(), out.data() + out.size()};
}

void DecodeConfig::validate() const {
  if (n < 1) throw std::invalid_argument("decode: n must be at least 1");
  if (max_len < 1) throw std::invalid_argument("decode: max_len must be at least 1");
  if (mode == Mode::sample && !(temperature > 0.0)) throw std::invalid_argument("decode: temperature must be positive");
  if (top_k < 0) throw std::invalid_argument("decode: top_k must be nonnegative");
}

std::vector<double> next_token_log_probs(const PolicyModel& model, std::span<const int> tokens,
                                         const DecodeConfig& decode, const corpus::Vocab& vocab) {
  Tape t(false);
  Var h = model.hidden(t, tokens);
  Var last = nn::slice_rows(h, h.rows() - 1, 1);
  Matrix z = nn::log_softmax_rows(model.lm_logits(t, last).value());
  if (decode.implicit) {
    const Matrix q = model.q_values(t, last).value();
    const double v = model.v_values(t, last).value()(0, 0);
    z = z.array() + model.ilql_config().eta * (q.array() - v);
  }
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  for (int id = 0; id < vocab.size(); ++id) {
    if (vocab.is_special(id) && id != vocab.eos()) z(0, id) = neg_inf;
  }
  const Matrix lp = nn::log_softmax_rows(z);
  return {lp.data(), lp.data() + lp.size()};
}

std::vector<TokenIds> sample_responses(const PolicyModel& model, std::span<const int> context,
                                       const DecodeConfig& decode, std::optional<int> condition_token,
                                       const corpus::Vocab& vocab, std::mt19937_64& rng) {
  decode.validate();
  TokenIds prompt(context.begin(), context.end());
  if (condition_token) prompt.push_back(*condition_token);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<TokenIds> out;
  // Greedy decoding is deterministic: decode once and replicate.
  const int distinct = decode.mode == DecodeConfig::Mode::greedy ? 1 : decode.n;
  for (int k = 0; k < distinct; ++k) {
    TokenIds tokens = prompt;
    TokenIds response;
    while (static_cast<int>(response.size()) < decode.max_len &&
           static_cast<int>(tokens.size()) < model.config().block) {
      const std::vector<double> lp = next_token_log_probs(model, tokens, decode, vocab);
      int next = 0;
      if (decode.mode == DecodeConfig::Mode::greedy) {
        next = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      } else {
        std::vector<double> w(lp.size());
        for (std::size_t i = 0; i < lp.size(); ++i) w[i] = lp[i] / decode.temperature;
        if (decode.top_k > 0 && decode.top_k < static_cast<int>(w.size())) {
          std::vector<double> sorted = w;
          std::nth_element(sorted.begin(), sorted.begin() + (decode.top_k - 1), sorted.end(), std::greater<>());
          const double cut = sorted[static_cast<std::size_t>(decode.top_k - 1)];
          for (double& x : w) {
            if (x < cut) x = -std::numeric_limits<double>::infinity();
          }
        }
        const double m = *std::max_element(w.begin(), w.end());
        double total = 0.0;
        for (double& x : w) {
          x = std::exp(x - m);
          total += x;
        }
        double u = unit(rng) * total;
        next = static_cast<int>(w.size()) - 1;
        for (std::size_t i = 0; i < w.size(); ++i) {
          u -= w[i];
          if (u < 0.0 && w[i] > 0.0) {
            next = static_cast<int>(i);
            break;
          }
        }
        while (w[static_cast<std::size_t>(next)] == 0.0 && next > 0) --next;
      }
      tokens.push_back(next);
      response.push_back(next);
      if (next == vocab.eos()) break;
    }
    out.push_back(std::move(response));
  }
  while (static_cast<int>(out.size()) < decode.n) out.push_back(out.front());
  return out;
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model, const CheckpointMeta& meta) {
  nlohmann::json j;
  j["format"] = "offrl-checkpoint";
  j["version"] = 1;
  j["vocab_hash"] = meta.vocab_hash;
  j["provenance"] = meta.provenance;
  j["model"] = model.to_json(true);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

PolicyModel load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", std::string()) != "offrl-checkpoint") {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  if (j.value("version", 0) != 1) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  }
  if (meta != nullptr) {
    meta->vocab_hash = j.value("vocab_hash", std::string());
    meta->provenance = j.value("provenance", nlohmann::json::object());
  }
  return PolicyModel::from_json(j.at("model"));
}

}  // namespace offrl::policy
