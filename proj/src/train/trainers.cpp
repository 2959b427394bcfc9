#include "offrl/train/trainers.hpp"

#include "offrl/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace offrl::train {

using nn::Tape;
using nn::Var;

namespace {

std::span<const int> inputs_of(const Example& e) {
  return {e.tokens.data(), e.tokens.size() - 1};
}

std::size_t target_count(const Example& e) {
  return e.tokens.size() - static_cast<std::size_t>(e.response_start);
}

std::span<const int> targets_of(const Example& e) {
  return {e.tokens.data() + e.response_start, target_count(e)};
}

void check_example(const Example& e) {
  if (e.response_start < 1 || e.response_start > static_cast<int>(e.tokens.size())) {
    throw std::invalid_argument("example has no context or an invalid response start");
  }
}

nn::AdamConfig adam_from_json(const nlohmann::json& j, nn::AdamConfig a) {
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  a.weight_decay = j.value("weight_decay", a.weight_decay);
  return a;
}

nlohmann::json adam_to_json(const nn::AdamConfig& a) {
  return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

std::vector<Matrix> snapshot(const nn::ParamStore& ps) {
  std::vector<Matrix> out;
  for (const auto& [_, p] : ps) out.push_back(p.value);
  return out;
}

void restore(nn::ParamStore& ps, const std::vector<Matrix>& values) {
  std::size_t i = 0;
  for (auto& [_, p] : ps) p.value = values[i++];
}

}  // namespace

// ---------------------------------------------------------------- supervised

void SupervisedConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (min_lr < 0.0 || min_lr > lr) throw std::invalid_argument("min_lr must lie in [0, lr]");
  if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be nonnegative");
}

nlohmann::json SupervisedConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},     {"min_lr", min_lr},
          {"adam", adam_to_json(adam)}, {"clip_norm", clip_norm}, {"seed", seed}, {"keep_best", keep_best}};
}

SupervisedConfig SupervisedConfig::from_json(const nlohmann::json& j) { return from_json(j, SupervisedConfig{}); }

SupervisedConfig SupervisedConfig::from_json(const nlohmann::json& j, SupervisedConfig d) {
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.min_lr = j.value("min_lr", d.min_lr);
  if (j.contains("adam")) d.adam = adam_from_json(j["adam"], d.adam);
  d.clip_norm = j.value("clip_norm", d.clip_norm);
  d.seed = j.value("seed", d.seed);
  d.keep_best = j.value("keep_best", d.keep_best);
  return d;
}

double mean_token_nll(const policy::PolicyModel& model, const std::vector<Example>& examples) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& e : examples) {
    check_example(e);
    if (target_count(e) == 0) continue;
    const Matrix lp = nn::log_softmax_rows(model.logits(inputs_of(e)));
    const auto tg = targets_of(e);
    for (std::size_t i = 0; i < tg.size(); ++i) nll -= lp(e.response_start - 1 + static_cast<nn::Index>(i), tg[i]);
    count += tg.size();
  }
  if (count == 0) throw std::invalid_argument("no response tokens to score");
  return nll / static_cast<double>(count);
}

long long SupervisedTrainer::steps_per_epoch(std::size_t n, int batch_size) {
  return static_cast<long long>((n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

SupervisedTrainer::SupervisedTrainer(policy::PolicyModel& model, SupervisedConfig cfg, long long total_steps)
    : model_(model), cfg_(cfg), schedule_{cfg.lr, total_steps, cfg.min_lr}, rng_(cfg.seed) {
  cfg_.validate();
}

void SupervisedTrainer::run_epoch(const std::vector<Example>& examples, const std::vector<Example>& val) {
  if (examples.empty()) throw std::invalid_argument("training on an empty example set");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng_);

  auto& ps = model_.params();
  double epoch_nll = 0.0;
  std::size_t epoch_tokens = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
    std::size_t tokens = 0;
    for (std::size_t k = start; k < end; ++k) tokens += target_count(examples[order[k]]);
    if (tokens == 0) continue;
    ps.zero_grad();
    double batch_nll = 0.0;
    for (std::size_t k = start; k < end; ++k) {
      const Example& e = examples[order[k]];
      check_example(e);
      if (target_count(e) == 0) continue;
      Tape t;
      Var h = model_.hidden(t, inputs_of(e));
      Var hs = nn::slice_rows(h, e.response_start - 1, static_cast<nn::Index>(target_count(e)));
      Var nll = nn::cross_entropy(model_.lm_logits(t, hs), targets_of(e));
      batch_nll += nll.scalar();
      t.backward(nn::scale(nll, 1.0 / static_cast<double>(tokens)));
    }
    if (cfg_.clip_norm > 0.0) nn::clip_grad_norm(ps, cfg_.clip_norm);
    nn::adam_step(ps, schedule_.at(ps.step), cfg_.adam);
    log_.step_loss.push_back(batch_nll / static_cast<double>(tokens));
    epoch_nll += batch_nll;
    epoch_tokens += tokens;
  }
  log_.epoch_loss.push_back(epoch_tokens ? epoch_nll / static_cast<double>(epoch_tokens) : 0.0);

  if (!val.empty()) {
    const double v = mean_token_nll(model_, val);
    log_.val_loss.push_back(v);
    const int epoch = static_cast<int>(log_.val_loss.size()) - 1;
    if (log_.best_epoch < 0 || v < best_val_) {
      best_val_ = v;
      log_.best_epoch = epoch;
      if (cfg_.keep_best) best_values_ = snapshot(ps);
    }
  } else {
    log_.best_epoch = static_cast<int>(log_.epoch_loss.size()) - 1;
  }
}

void SupervisedTrainer::finish() {
  if (cfg_.keep_best && !best_values_.empty()) restore(model_.params(), best_values_);
}

TrainLog train_supervised(policy::PolicyModel& model, const std::vector<Example>& train, const std::vector<Example>& val,
                          const SupervisedConfig& cfg) {
  cfg.validate();
  SupervisedTrainer trainer(model, cfg, cfg.epochs * SupervisedTrainer::steps_per_epoch(train.size(), cfg.batch_size));
  for (int e = 0; e < cfg.epochs; ++e) trainer.run_epoch(train, val);
  trainer.finish();
  return trainer.log();
}

std::vector<Example> pair_examples(const std::vector<corpus::ContextResponsePair>& pairs) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(policy::make_sequence(p.context, p.response));
  return out;
}

std::vector<Example> record_examples(const OfflineDataset& data) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& r : data.records) out.push_back(policy::make_sequence(r.context, r.response));
  return out;
}

std::vector<Example> dt_examples(const OfflineDataset& data, const BinQuantizer& q, const corpus::Vocab& vocab) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& r : data.records) {
    out.push_back(policy::make_sequence(r.context, r.response, quantize_return(r.reward, q, vocab)));
  }
  return out;
}

TrainLog train_tf(policy::PolicyModel& model, const std::vector<corpus::ContextResponsePair>& train,
                  const std::vector<corpus::ContextResponsePair>& val, const SupervisedConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("train_tf needs at least one pair");
  return train_supervised(model, pair_examples(train), pair_examples(val), cfg);
}

TrainLog train_tf_all(policy::PolicyModel& model, const OfflineDataset& data, const OfflineDataset& val,
                      const SupervisedConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_tf_all on an empty dataset");
  return train_supervised(model, record_examples(data), record_examples(val), cfg);
}

TrainLog train_tf_top(policy::PolicyModel& model, const OfflineDataset& data, const OfflineDataset& val,
                      const TopFilterConfig& filter, const SupervisedConfig& cfg) {
  const OfflineDataset top = filter_top(data, filter);
  OfflineDataset val_top;
  if (!val.empty()) {
    TopFilterConfig fixed;
    fixed.human_only = filter.human_only;
    if (!filter.human_only) fixed.delta = 1.0 - filter.threshold(data.rewards());
    try {
      val_top = filter_top(val, fixed);
    } catch (const std::runtime_error&) {
      val_top = OfflineDataset();  // nothing in validation clears the bar
    }
  }
  return train_supervised(model, record_examples(top), record_examples(val_top), cfg);
}

TrainLog train_dt(policy::PolicyModel& model, const OfflineDataset& data, const OfflineDataset& val,
                  const BinQuantizer& q, const corpus::Vocab& vocab, const SupervisedConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_dt on an empty dataset");
  return train_supervised(model, dt_examples(data, q, vocab), dt_examples(val, q, vocab), cfg);
}

// ---------------------------------------------------------------- ILQL

void ILQLConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  if (alpha < 0.0) throw std::invalid_argument("alpha must be nonnegative");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
  if (eta < 0.0) throw std::invalid_argument("eta must be nonnegative");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(polyak > 0.0 && polyak <= 1.0)) throw std::invalid_argument("polyak must lie in (0, 1]");
}

nlohmann::json ILQLConfig::to_json() const {
  return {{"alpha", alpha},   {"tau", tau},     {"gamma", gamma},       {"eta", eta},
          {"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},   {"min_lr", min_lr},
          {"adam", adam_to_json(adam)}, {"target_v", target_v}, {"polyak", polyak},
          {"finetune_backbone", finetune_backbone}, {"seed", seed}};
}

ILQLConfig ILQLConfig::from_json(const nlohmann::json& j) { return from_json(j, ILQLConfig{}); }

ILQLConfig ILQLConfig::from_json(const nlohmann::json& j, ILQLConfig d) {
  d.alpha = j.value("alpha", d.alpha);
  d.tau = j.value("tau", d.tau);
  d.gamma = j.value("gamma", d.gamma);
  d.eta = j.value("eta", d.eta);
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.min_lr = j.value("min_lr", d.min_lr);
  if (j.contains("adam")) d.adam = adam_from_json(j["adam"], d.adam);
  d.target_v = j.value("target_v", d.target_v);
  d.polyak = j.value("polyak", d.polyak);
  d.finetune_backbone = j.value("finetune_backbone", d.finetune_backbone);
  d.seed = j.value("seed", d.seed);
  return d;
}

ILQLLoss ilql_loss(policy::PolicyModel& model, Tape& t, Var h, const Matrix& behavior_log_probs,
                   std::span<const int> actions, double reward, const ILQLConfig& cfg) {
  if (!model.has_ilql_heads()) throw std::logic_error("ilql_loss: model has no ILQL heads");
  const auto steps = static_cast<nn::Index>(actions.size());
  if (steps == 0 || h.rows() != steps || behavior_log_probs.rows() != steps) {
    throw nn::ShapeError("ilql_loss: features, behavior log-probs and actions disagree in length");
  }
  Var q = model.q_values(t, h);
  Var v = model.v_values(t, h);
  Var q_sa = nn::gather(q, actions);

  const Matrix v_next = cfg.target_v ? model.target_v_values(t, h).value() : v.value();
  Matrix target(steps, 1);
  for (nn::Index i = 0; i + 1 < steps; ++i) target(i, 0) = cfg.gamma * v_next(i + 1, 0);
  target(steps - 1, 0) = reward;

  ILQLLoss out;
  Var td = nn::squared_error(q_sa, t.constant(target));
  out.td = td.scalar();
  Var loss = td;
  if (cfg.alpha > 0.0) {
    Var beta = t.constant(behavior_log_probs);
    Var kl = nn::kl_divergence(beta, nn::add(beta, nn::scale(q, cfg.eta)));
    out.kl = kl.scalar();
    loss = nn::add(loss, nn::scale(kl, cfg.alpha));
  }
  out.q_loss = loss;
  out.v_loss = nn::expectile_loss(nn::sub(nn::detach(q_sa), v), cfg.tau);
  out.expectile = out.v_loss.scalar();
  return out;
}

std::vector<ILQLSequence> ilql_sequences(const OfflineDataset& data) {
  std::vector<ILQLSequence> out;
  out.reserve(data.size());
  for (const auto& r : data.records) {
    if (!r.response.empty()) out.push_back({r.context, r.response, r.reward});
  }
  return out;
}

ILQLLog train_ilql(policy::PolicyModel& model, const std::vector<ILQLSequence>& data, const ILQLConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_ilql on an empty dataset");
  if (!model.has_ilql_heads()) {
    model.add_ilql_heads({cfg.eta, cfg.target_v, cfg.polyak}, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  } else {
    model.ilql_config().eta = cfg.eta;
  }
  model.set_backbone_trainable(cfg.finetune_backbone);
  model.role = policy::Role::learned;

  // Behavior log-probabilities come from the starting model and stay fixed.
  // With a frozen backbone the state features are fixed too.
  struct Cached {
    policy::Sequence seq;
    Matrix features;
    Matrix behavior;
  };
  std::vector<Cached> cache;
  cache.reserve(data.size());
  for (const auto& d : data) {
    Cached c;
    c.seq = policy::make_sequence(d.context, d.response);
    Tape t(false);
    const std::span<const int> in(c.seq.tokens.data(), c.seq.tokens.size() - 1);
    const auto model_const = static_cast<const policy::PolicyModel*>(&model);
    Var h = nn::slice_rows(model_const->hidden(t, in), c.seq.response_start - 1,
                           static_cast<nn::Index>(d.response.size()));
    c.behavior = nn::log_softmax_rows(model_const->lm_logits(t, h).value());
    if (!cfg.finetune_backbone) c.features = h.value();
    cache.push_back(std::move(c));
  }

  auto& ps = model.params();
  const long long per_epoch = SupervisedTrainer::steps_per_epoch(data.size(), cfg.batch_size);
  const nn::CosineSchedule schedule{cfg.lr, per_epoch * cfg.epochs, cfg.min_lr};
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ILQLLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::size_t tokens = 0;
      for (std::size_t k = start; k < end; ++k) tokens += data[order[k]].response.size();
      ps.zero_grad();
      double total = 0.0, td = 0.0, kl = 0.0, ex = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& d = data[order[k]];
        const auto& c = cache[order[k]];
        Tape t;
        Var h;
        if (cfg.finetune_backbone) {
          const std::span<const int> in(c.seq.tokens.data(), c.seq.tokens.size() - 1);
          h = nn::slice_rows(model.hidden(t, in), c.seq.response_start - 1, static_cast<nn::Index>(d.response.size()));
        } else {
          h = t.constant(c.features);
        }
        const ILQLLoss l = ilql_loss(model, t, h, c.behavior, d.response, d.reward, cfg);
        Var loss = nn::scale(nn::add(l.q_loss, l.v_loss), 1.0 / static_cast<double>(tokens));
        total += loss.scalar();
        td += l.td;
        kl += l.kl;
        ex += l.expectile;
        t.backward(loss);
      }
      nn::adam_step(ps, schedule.at(ps.step), cfg.adam);
      if (cfg.target_v) model.update_target_v();
      const auto n = static_cast<double>(tokens);
      log.step_loss.push_back(total);
      log.td.push_back(td / n);
      log.kl.push_back(kl / n);
      log.expectile.push_back(ex / n);
    }
  }
  model.set_backbone_trainable(true);
  return log;
}

CriticScore critic_score_from_name(std::string_view name) {
  for (CriticScore c :
       {CriticScore::implicit_log_prob, CriticScore::mean_q, CriticScore::last_q, CriticScore::advantage_sum}) {
    if (critic_score_name(c) == name) return c;
  }
  throw std::invalid_argument("unknown critic score \"" + std::string(name) + "\"");
}

std::string_view critic_score_name(CriticScore c) {
  switch (c) {
    case CriticScore::implicit_log_prob: return "implicit_log_prob";
    case CriticScore::mean_q: return "mean_q";
    case CriticScore::last_q: return "last_q";
    case CriticScore::advantage_sum: return "advantage_sum";
  }
  return "unknown";
}

double critic_score(const policy::PolicyModel& model, std::span<const int> context, std::span<const int> response,
                    CriticScore how) {
  if (response.empty()) return 0.0;
  const policy::ILQLValues vals = policy::ilql_values(model, context, response);
  if (how == CriticScore::implicit_log_prob) {
    TokenIds tokens(context.begin(), context.end());
    tokens.insert(tokens.end(), response.begin(), response.end());
    const auto n = static_cast<nn::Index>(response.size());
    const Matrix behavior = nn::log_softmax_rows(model.logits(tokens).middleRows(
        static_cast<nn::Index>(context.size()) - 1, n));
    const double eta = model.ilql_config().eta;
    Matrix shifted = behavior + eta * vals.q;
    for (nn::Index i = 0; i < n; ++i) shifted.row(i).array() -= eta * vals.v[static_cast<std::size_t>(i)];
    const Matrix lp = nn::log_softmax_rows(shifted);
    double total = 0.0;
    for (nn::Index i = 0; i < n; ++i) total += lp(i, response[static_cast<std::size_t>(i)]);
    return total;
  }
  double sum_q = 0.0;
  double sum_adv = 0.0;
  double last = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const double q = vals.q(static_cast<nn::Index>(i), response[i]);
    sum_q += q;
    sum_adv += q - vals.v[i];
    last = q;
  }
  switch (how) {
    case CriticScore::mean_q: return sum_q / static_cast<double>(response.size());
    case CriticScore::last_q: return last;
    case CriticScore::advantage_sum: return sum_adv;
    case CriticScore::implicit_log_prob: break;
  }
  return 0.0;
}

// ---------------------------------------------------------------- PPO

void PPOConfig::validate() const {
  if (kl_coef < 0.0 || value_coef < 0.0) throw std::invalid_argument("PPO coefficients must be nonnegative");
  if (clip && !(clip_eps > 0.0)) throw std::invalid_argument("clip_eps must be positive");
  if (rollout_batch < 1 || ppo_epochs < 1 || iterations < 0) throw std::invalid_argument("PPO loop sizes must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(kl_target > 0.0) || !(kl_horizon > 0.0)) throw std::invalid_argument("KL controller settings must be positive");
  decode.validate();
}

nlohmann::json PPOConfig::to_json() const {
  return {{"kl_coef", kl_coef},       {"adaptive_kl", adaptive_kl}, {"kl_target", kl_target},
          {"kl_horizon", kl_horizon}, {"value_coef", value_coef},   {"clip_eps", clip_eps},
          {"clip", clip},             {"rollout_batch", rollout_batch}, {"ppo_epochs", ppo_epochs},
          {"iterations", iterations}, {"lr", lr},                   {"adam", adam_to_json(adam)},
          {"temperature", decode.temperature}, {"max_len", decode.max_len}, {"seed", seed}};
}

PPOConfig PPOConfig::from_json(const nlohmann::json& j) { return from_json(j, PPOConfig{}); }

PPOConfig PPOConfig::from_json(const nlohmann::json& j, PPOConfig d) {
  d.kl_coef = j.value("kl_coef", d.kl_coef);
  d.adaptive_kl = j.value("adaptive_kl", d.adaptive_kl);
  d.kl_target = j.value("kl_target", d.kl_target);
  d.kl_horizon = j.value("kl_horizon", d.kl_horizon);
  d.value_coef = j.value("value_coef", d.value_coef);
  d.clip_eps = j.value("clip_eps", d.clip_eps);
  d.clip = j.value("clip", d.clip);
  d.rollout_batch = j.value("rollout_batch", d.rollout_batch);
  d.ppo_epochs = j.value("ppo_epochs", d.ppo_epochs);
  d.iterations = j.value("iterations", d.iterations);
  d.lr = j.value("lr", d.lr);
  if (j.contains("adam")) d.adam = adam_from_json(j["adam"], d.adam);
  d.decode.temperature = j.value("temperature", d.decode.temperature);
  d.decode.max_len = j.value("max_len", d.decode.max_len);
  d.seed = j.value("seed", d.seed);
  return d;
}

PPOStats ppo_step(policy::PolicyModel& model, const policy::PolicyModel& behavior,
                  const std::vector<const corpus::ContextResponsePair*>& contexts, const rewards::RewardModel& reward,
                  const corpus::Vocab& vocab, PPOConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (!model.has_value_head()) throw std::logic_error("ppo_step: model has no value head");
  if (contexts.empty()) throw std::invalid_argument("ppo_step: empty rollout batch");

  struct Rollout {
    policy::Sequence seq;
    TokenIds actions;
    std::vector<double> old_lp;
    Matrix behavior_logits;
    std::vector<double> advantage;
    Matrix ret;
  };
  policy::DecodeConfig decode = cfg.decode;
  decode.n = 1;
  std::vector<TokenIds> responses;
  for (const auto* p : contexts) {
    responses.push_back(policy::sample_responses(model, p->context, decode, std::nullopt, vocab, rng).front());
  }
  const std::vector<double> r = reward.rewards(responses, contexts);

  PPOStats stats;
  const auto& cmodel = static_cast<const policy::PolicyModel&>(model);
  std::vector<Rollout> batch;
  double kl_sum = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    stats.mean_reward += r[i] / static_cast<double>(contexts.size());
    if (responses[i].empty()) continue;
    Rollout ro;
    ro.seq = policy::make_sequence(contexts[i]->context, responses[i]);
    ro.actions = responses[i];
    const auto n = static_cast<nn::Index>(ro.actions.size());
    const std::span<const int> in(ro.seq.tokens.data(), ro.seq.tokens.size() - 1);
    Tape t(false);
    Var h = nn::slice_rows(cmodel.hidden(t, in), ro.seq.response_start - 1, n);
    const Matrix lp = nn::log_softmax_rows(cmodel.lm_logits(t, h).value());
    const Matrix v = cmodel.value_head(t, h).value();
    Tape tb(false);
    Var hb = nn::slice_rows(behavior.hidden(tb, in), ro.seq.response_start - 1, n);
    ro.behavior_logits = behavior.lm_logits(tb, hb).value();
    const Matrix blp = nn::log_softmax_rows(ro.behavior_logits);
    ro.ret = Matrix::Constant(n, 1, r[i]);
    for (nn::Index k = 0; k < n; ++k) {
      ro.old_lp.push_back(lp(k, ro.actions[static_cast<std::size_t>(k)]));
      ro.advantage.push_back(r[i] - v(k, 0));
      kl_sum += (lp.row(k).array().exp() * (lp.row(k) - blp.row(k)).array()).sum();
    }
    tokens += static_cast<std::size_t>(n);
    batch.push_back(std::move(ro));
  }
  stats.kl = tokens ? kl_sum / static_cast<double>(tokens) : 0.0;

  auto& ps = model.params();
  const double eps = cfg.clip ? cfg.clip_eps : 1e9;
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.ppo_epochs && tokens > 0; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    ps.zero_grad();
    double pl = 0.0, vl = 0.0;
    for (std::size_t idx : order) {
      const Rollout& ro = batch[idx];
      const auto n = static_cast<nn::Index>(ro.actions.size());
      const std::span<const int> in(ro.seq.tokens.data(), ro.seq.tokens.size() - 1);
      Tape t;
      Var h = nn::slice_rows(model.hidden(t, in), ro.seq.response_start - 1, n);
      Var logits = model.lm_logits(t, h);
      Var new_lp = nn::gather(nn::log_softmax(logits), ro.actions);
      Matrix old(n, 1);
      for (nn::Index k = 0; k < n; ++k) old(k, 0) = ro.old_lp[static_cast<std::size_t>(k)];
      Var ratio = nn::exp(nn::sub(new_lp, t.constant(old)));
      if (epoch == 0) {
        stats.first_epoch_ratio_dev =
            std::max(stats.first_epoch_ratio_dev, (ratio.value().array() - 1.0).abs().maxCoeff());
      }
      Var surrogate = nn::clipped_surrogate(ratio, ro.advantage, eps);
      Var kl = nn::kl_divergence(logits, t.constant(ro.behavior_logits));
      Var value = model.value_head(t, nn::detach(h));
      Var vloss = nn::squared_error(value, t.constant(ro.ret));
      Var loss = nn::add(nn::add(nn::scale(surrogate, -1.0), nn::scale(kl, cfg.kl_coef)), nn::scale(vloss, cfg.value_coef));
      pl += -surrogate.scalar();
      vl += vloss.scalar();
      t.backward(nn::scale(loss, 1.0 / static_cast<double>(tokens)));
    }
    nn::adam_step(ps, cfg.lr, cfg.adam);
    stats.policy_loss = pl / static_cast<double>(tokens);
    stats.value_loss = vl / static_cast<double>(tokens);
  }

  if (cfg.adaptive_kl) {
    const double err = std::clamp(stats.kl / cfg.kl_target - 1.0, -0.2, 0.2);
    cfg.kl_coef *= 1.0 + err * static_cast<double>(tokens) / cfg.kl_horizon;
  }
  stats.kl_coef = cfg.kl_coef;
  return stats;
}

std::vector<PPOStats> train_ppo(policy::PolicyModel& model, const policy::PolicyModel& behavior,
                                const std::vector<corpus::ContextResponsePair>& pairs,
                                const rewards::RewardModel& reward, const corpus::Vocab& vocab, PPOConfig cfg) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train_ppo needs at least one pair");
  if (!model.has_value_head()) model.add_value_head(cfg.seed ^ 0x5851f42d4c957f2dULL);
  model.role = policy::Role::learned;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::vector<PPOStats> out;
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<const corpus::ContextResponsePair*> batch;
    for (int k = 0; k < cfg.rollout_batch; ++k) batch.push_back(&pairs[pick(rng)]);
    out.push_back(ppo_step(model, behavior, batch, reward, vocab, cfg, rng));
  }
  return out;
}

// ---------------------------------------------------------------- Quark

QuarkLog quark_loop(policy::PolicyModel& model, OfflineDataset& data, const OfflineDataset& val,
                    const std::vector<corpus::ContextResponsePair>& pairs, const rewards::RewardModel& reward,
                    const BinQuantizer& q, const corpus::Vocab& vocab, const SupervisedConfig& train_cfg,
                    const QuarkConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("quark needs at least one epoch");
  if (cfg.collect_per_epoch < 0) throw std::invalid_argument("collect_per_epoch must be nonnegative");
  if (cfg.collect_per_epoch > 0 && pairs.empty()) throw std::invalid_argument("quark needs pairs to collect from");
  if (data.empty()) throw std::invalid_argument("quark needs a nonempty initial dataset");

  long long total = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    total += SupervisedTrainer::steps_per_epoch(
        data.size() + static_cast<std::size_t>(e) * static_cast<std::size_t>(cfg.collect_per_epoch),
        train_cfg.batch_size);
  }
  SupervisedTrainer trainer(model, train_cfg, total);
  const std::vector<Example> val_examples = dt_examples(val, q, vocab);
  std::vector<Example> examples = dt_examples(data, q, vocab);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pairs.empty() ? 0 : pairs.size() - 1);
  policy::DecodeConfig decode = cfg.decode;
  decode.n = 1;

  QuarkLog log;
  for (int e = 0; e < cfg.epochs; ++e) {
    if (cfg.collect_per_epoch > 0) {
      std::vector<TokenIds> responses;
      std::vector<const corpus::ContextResponsePair*> targets;
      for (int k = 0; k < cfg.collect_per_epoch; ++k) {
        const auto* p = &pairs[pick(rng)];
        responses.push_back(
            policy::sample_responses(model, p->context, decode, vocab.bin(q.top_bin()), vocab, rng).front());
        targets.push_back(p);
      }
      const auto r = reward.rewards(responses, targets);
      double mean = 0.0;
      for (int k = 0; k < cfg.collect_per_epoch; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        OfflineRecord rec;
        rec.conversation_id = targets[ks]->conversation_id;
        rec.turn_index = targets[ks]->turn_index;
        rec.context = targets[ks]->context;
        rec.response = responses[ks];
        rec.reward = r[ks];
        rec.source = Source::model;
        rec.sample_index = 1000 * (e + 1) + k;
        rec.truncated = rec.response.empty() || rec.response.back() != vocab.eos();
        data.records.push_back(std::move(rec));
        mean += r[ks] / cfg.collect_per_epoch;
      }
      log.collected_reward.push_back(mean);
      data.canonicalize();
      examples = dt_examples(data, q, vocab);
    }
    log.dataset_sizes.push_back(data.size());
    trainer.run_epoch(examples, val_examples);
  }
  trainer.finish();
  log.train = trainer.log();
  return log;
}

}  // namespace offrl::train
