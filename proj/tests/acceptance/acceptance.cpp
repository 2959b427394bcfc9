// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
//
//   acceptance --work DIR --fixtures DIR --tiny CONFIG [criterion ...]

#include "offrl/nn/ops.hpp"
#include "offrl/nn/optim.hpp"
#include "offrl/oracle/oracle.hpp"
#include "offrl/pipeline/pipeline.hpp"
#include "offrl/train/trainers.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace offrl;
namespace fs = std::filesystem;
using nn::Matrix;
using nn::Tape;
using nn::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Paths {
  fs::path work;
  fs::path fixtures;
  fs::path tiny;
};
Paths g_paths;

// ---------------------------------------------------------------- 1

Outcome gradient_exactness() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  int nets = 0;
  for (int k = 0; k < 24; ++k) {
    policy::CausalLMConfig c;
    c.vocab_size = 6 + k % 5;
    c.dim = (k % 3 == 0) ? 4 : 6;
    c.heads = (c.dim == 4) ? 2 : (k % 2 == 0 ? 3 : 1);
    c.layers = 1 + k % 2;
    c.block = 16;
    c.backbone = (k % 4 == 3) ? policy::Backbone::gru : policy::Backbone::attention;
    policy::PolicyModel m(c, 100 + k);
    m.add_ilql_heads({1.0, false, 0.005}, 200 + k);
    m.set_backbone_trainable(true);
    std::normal_distribution<double> nd(0.0, 0.5);
    for (auto& [name, p] : m.params()) {
      for (nn::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = nd(rng);
    }

    std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
    const int len = 5 + k % 4;
    std::vector<int> tokens(static_cast<std::size_t>(len));
    for (int& t : tokens) t = tok(rng);
    const std::span<const int> in(tokens.data(), tokens.size() - 1);
    const std::span<const int> targets(tokens.data() + 1, tokens.size() - 1);
    const auto n = static_cast<nn::Index>(in.size());
    Matrix behavior(n, c.vocab_size), td_target(n, 1), v_target(n, 1);
    for (nn::Index i = 0; i < behavior.size(); ++i) behavior.data()[i] = nd(rng);
    for (nn::Index i = 0; i < n; ++i) {
      td_target(i, 0) = nd(rng);
      v_target(i, 0) = nd(rng);
    }
    const double tau = 0.6 + 0.1 * (k % 3);
    std::vector<double> weights(static_cast<std::size_t>(n));
    for (auto& w : weights) w = 0.5 + std::abs(nd(rng));

    const nn::LossFn loss = [&](Tape& t, nn::ParamStore&) {
      Var h = m.hidden(t, in);
      Var logits = m.lm_logits(t, h);
      Var q = m.q_values(t, h);
      Var v = m.v_values(t, h);
      Var ce = nn::cross_entropy(logits, targets, weights);
      Var kl = nn::kl_divergence(t.constant(behavior), nn::add(logits, q), weights);
      Var td = nn::squared_error(nn::gather(q, targets), t.constant(td_target), weights);
      Var ex = nn::expectile_loss(nn::sub(t.constant(v_target), v), tau, weights);
      return nn::add(nn::add(ce, kl), nn::add(td, ex));
    };
    const double e = nn::finite_difference_check(loss, m.params());
    worst = std::max(worst, e);
    ++nets;
  }
  return {nets >= 20 && worst < 1e-4, fmt("%d networks, max relative error %.2e (< 1e-4)", nets, worst)};
}

// ---------------------------------------------------------------- 2

double fit_expectile(const std::vector<double>& xs, double tau) {
  nn::ParamStore ps;
  ps.add("v", Matrix::Zero(1, 1));
  Matrix col(static_cast<nn::Index>(xs.size()), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) col(static_cast<nn::Index>(i), 0) = xs[i];
  const int steps = 4000;
  const nn::CosineSchedule sched{0.05, steps, 0.0};
  for (int s = 0; s < steps; ++s) {
    ps.zero_grad();
    Tape t;
    Var v = t.param(ps.at("v"));
    Var u = nn::add_row(t.constant(col), nn::scale(v, -1.0));
    t.backward(nn::expectile_loss(u, tau));
    nn::adam_step(ps, sched.at(s));
  }
  return ps.at("v").value(0, 0);
}

Outcome expectile_oracle() {
  std::mt19937_64 rng(11);
  std::vector<std::vector<double>> sets;
  {
    std::normal_distribution<double> d(0.3, 1.0);
    std::vector<double> a(64);
    for (auto& x : a) x = d(rng);
    sets.push_back(a);
  }
  {
    std::exponential_distribution<double> d(2.0);
    std::vector<double> a(40);
    for (auto& x : a) x = d(rng);
    sets.push_back(a);
  }
  sets.push_back({0.0, 0.0, 0.0, 1.0, 1.0});
  sets.push_back({-2.0, 0.5, 0.7, 3.0});
  double worst = 0.0;
  for (double tau : {0.5, 0.7, 0.9}) {
    for (const auto& s : sets) worst = std::max(worst, std::abs(fit_expectile(s, tau) - oracle::expectile(s, tau)));
  }
  return {worst < 1e-3, fmt("%zu sample sets x 3 expectiles, max |v - oracle| = %.2e (< 1e-3)", sets.size(), worst)};
}

// ---------------------------------------------------------------- 3

// Tree actions are token ids 0..V-1; token V is the fixed context.
struct TreeRun {
  double max_q_err = 0.0;
  int states = 0;
  int greedy_ok = 0;
};

TreeRun ilql_on_tree(const oracle::TreeMDP& mdp) {
  const int ctx_token = mdp.vocab_size;
  const std::vector<int> context = {ctx_token};

  // Full coverage: every leaf, repeated in proportion to its behavior
  // probability (uniform over a node's actions unless the fixture gives one).
  std::map<oracle::Prefix, double> path_prob = {{{}, 1.0}};
  std::vector<std::pair<oracle::Prefix, double>> leaf_probs;
  std::vector<oracle::Prefix> frontier = {{}};
  while (!frontier.empty()) {
    const auto p = frontier.back();
    frontier.pop_back();
    const auto& acts = mdp.children.at(p);
    for (std::size_t i = 0; i < acts.size(); ++i) {
      const double b = mdp.behavior.count(p) ? mdp.behavior.at(p)[i] : 1.0 / static_cast<double>(acts.size());
      auto child = p;
      child.push_back(acts[i]);
      const double pr = path_prob[p] * b;
      if (mdp.children.count(child)) {
        path_prob[child] = pr;
        frontier.push_back(child);
      } else {
        leaf_probs.emplace_back(child, pr);
      }
    }
  }
  double min_p = 1.0;
  for (const auto& [leaf, pr] : leaf_probs) min_p = std::min(min_p, pr);
  std::vector<train::ILQLSequence> data;
  std::vector<policy::Sequence> examples;
  for (const auto& [leaf, pr] : leaf_probs) {
    const int copies = std::max(1, static_cast<int>(std::lround(pr / min_p)));
    for (int c = 0; c < copies; ++c) {
      data.push_back({context, leaf, mdp.leaf_reward.at(leaf)});
      examples.push_back(policy::make_sequence(context, leaf));
    }
  }

  policy::CausalLMConfig mc;
  mc.vocab_size = mdp.vocab_size + 1;
  mc.dim = 16;
  mc.layers = 1;
  mc.heads = 2;
  mc.block = 8;
  policy::PolicyModel model(mc, 5);
  train::SupervisedConfig sc;
  sc.epochs = 200;
  sc.batch_size = 8;
  sc.lr = 1e-2;
  sc.keep_best = false;
  train::train_supervised(model, examples, {}, sc);

  // A frozen backbone aliases prefixes that share their last token and
  // position, so the heads could not represent Q* on the deeper trees.
  // The behavior log-probabilities stay those of the starting model.
  train::ILQLConfig ic;
  ic.alpha = 1e-3;
  ic.tau = 0.99;
  ic.gamma = mdp.gamma;
  ic.epochs = 2000;
  ic.batch_size = 8;
  ic.lr = 1e-3;
  ic.adam = {0.9, 0.999, 1e-8, 0.0};
  ic.target_v = true;
  ic.finetune_backbone = true;
  train::train_ilql(model, data, ic);
  // Large eta: the implicit policy is then greedy in Q - V, and the check
  // does not depend on how well the behavior LM matches the data frequencies.
  model.ilql_config().eta = 100.0;

  const auto sol = oracle::tree_dp(mdp, mdp.gamma);
  TreeRun out;
  for (const auto& [leaf, pr] : leaf_probs) {
    const auto vals = policy::ilql_values(model, context, leaf);
    for (std::size_t t = 0; t < leaf.size(); ++t) {
      const oracle::Prefix s(leaf.begin(), leaf.begin() + static_cast<long>(t));
      const double q = vals.q(static_cast<nn::Index>(t), leaf[t]);
      out.max_q_err = std::max(out.max_q_err, std::abs(q - sol.q.at({s, leaf[t]})));
    }
  }
  for (const auto& [s, acts] : mdp.children) {
    // The implicit policy's support is the behavior support, so the argmax
    // runs over the actions present in the data.
    const auto lp = policy::implicit_policy_logits(model, context, s);
    int best = acts.front();
    for (int a : acts) {
      if (lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(best)]) best = a;
    }
    ++out.states;
    out.greedy_ok += best == sol.best_action(s);
  }
  return out;
}

Outcome ilql_vs_dp() {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(g_paths.fixtures)) {
    if (e.path().filename().string().rfind("tree_", 0) == 0) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) return {false, "no tree fixtures in " + g_paths.fixtures.string()};
  bool pass = true;
  std::string detail;
  for (const auto& f : files) {
    const auto mdp = oracle::TreeMDP::load(f);
    if (mdp.vocab_size > 8 || mdp.depth() > 5) return {false, f.filename().string() + " exceeds vocab 8 / depth 5"};
    const auto r = ilql_on_tree(mdp);
    pass = pass && r.max_q_err <= 0.05 && r.greedy_ok == r.states;
    detail += fmt("%s |Q-Q*|=%.3f greedy %d/%d; ", f.stem().c_str(), r.max_q_err, r.greedy_ok, r.states);
  }
  return {pass, detail + "(tolerance 0.05, alpha 1e-3)"};
}

// ---------------------------------------------------------------- 4

Outcome dt_counting_oracle() {
  const corpus::Conversation conv{"c", {{corpus::Speaker::user, {"hi", "there"}, std::nullopt, {}},
                                        {corpus::Speaker::system, {"a", "b", "c", "d"}, std::nullopt, {}}}};
  const auto vocab = corpus::Vocab::build({conv}, 2);
  const int a = vocab.id("a"), b = vocab.id("b"), c = vocab.id("c"), d = vocab.id("d");
  const int eos = vocab.eos();
  const std::vector<std::vector<int>> contexts = {{vocab.id("hi"), vocab.sep()}, {vocab.id("there"), vocab.sep()}};
  // (response, reward, copies) per context; the same response can carry
  // different rewards so both bins share prefixes.
  struct Row {
    std::vector<int> response;
    double reward;
    int copies;
  };
  const std::vector<std::vector<Row>> rows = {
      {{{a, b, eos}, 1.0, 3}, {{a, c, eos}, 1.0, 1}, {{a, c, eos}, 0.0, 2}, {{d, eos}, 0.0, 2}, {{b, eos}, 1.0, 2}},
      {{{c, eos}, 1.0, 1}, {{c, d, eos}, 1.0, 3}, {{c, d, eos}, 0.0, 1}, {{a, eos}, 0.0, 3}}};

  train::OfflineDataset data;
  std::vector<oracle::ScoredSequence> scored;
  for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
    int idx = 0;
    for (const auto& r : rows[ci]) {
      for (int k = 0; k < r.copies; ++k) {
        train::OfflineRecord rec;
        rec.conversation_id = "c" + std::to_string(ci);
        rec.context = contexts[ci];
        rec.response = r.response;
        rec.reward = r.reward;
        rec.source = idx == 0 ? train::Source::human : train::Source::model;
        rec.sample_index = idx++;
        data.records.push_back(rec);
        scored.push_back({rec.context, rec.response, rec.reward});
      }
    }
  }
  data.canonicalize();

  const train::BinQuantizer q(2);
  policy::CausalLMConfig mc;
  mc.vocab_size = vocab.size();
  mc.dim = 16;
  mc.layers = 1;
  mc.heads = 2;
  mc.block = 8;
  policy::PolicyModel model(mc, 3);
  train::SupervisedConfig sc;
  sc.epochs = 1500;
  sc.batch_size = static_cast<int>(data.size());
  sc.lr = 1e-2;
  sc.keep_best = false;
  sc.clip_norm = 0.0;
  train::train_dt(model, data, data, q, vocab, sc);

  const oracle::EmpiricalConditional emp(scored, q.edges());
  double worst = 0.0;
  int states = 0;
  for (const auto& [key, dist] : emp.table()) {
    std::vector<int> tokens = key.context;
    tokens.push_back(vocab.bin(key.bin));
    tokens.insert(tokens.end(), key.prefix.begin(), key.prefix.end());
    const auto logits = model.logits(tokens);
    const Matrix p = nn::softmax_rows(logits.bottomRows(1));
    double tv = 0.0;
    for (nn::Index t = 0; t < p.cols(); ++t) {
      const auto it = dist.find(static_cast<int>(t));
      tv += std::abs(p(0, t) - (it == dist.end() ? 0.0 : it->second));
    }
    worst = std::max(worst, 0.5 * tv);
    ++states;
  }
  return {worst <= 0.05, fmt("%d (context, prefix, bin) states, max TV %.4f (<= 0.05)", states, worst)};
}

// ---------------------------------------------------------------- 5

Outcome filter_quantizer() {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.4);
  train::OfflineDataset data;
  for (int g = 0; g < 50; ++g) {
    for (int i = 0; i < 6; ++i) {
      train::OfflineRecord r;
      r.conversation_id = fmt("conv%03d", g);
      r.context = {4, 2};
      r.response = {5 + i % 3, 1};
      r.reward = coin(rng) ? 1.0 : 0.0;
      r.source = i == 0 ? train::Source::human : train::Source::model;
      r.sample_index = i;
      data.records.push_back(r);
    }
  }
  data.canonicalize();
  std::vector<train::OfflineRecord> ones;
  for (const auto& r : data.records) {
    if (r.reward == 1.0) ones.push_back(r);
  }
  bool pass = true;
  for (double delta : {0.0, 0.25, 0.5, 0.75, 0.999}) {
    train::TopFilterConfig f;
    f.delta = delta;
    pass = pass && train::filter_top(data, f).records == ones;
  }
  const corpus::Conversation conv{"c", {{corpus::Speaker::system, {"x"}, std::nullopt, {}}}};
  const auto vocab = corpus::Vocab::build({conv}, 2);
  const train::BinQuantizer q(2);
  pass = pass && train::quantize_return(0.0, q, vocab) == vocab.bin(0) &&
         train::quantize_return(1.0, q, vocab) == vocab.bin(1) && vocab.bin(0) != vocab.bin(1);
  return {pass, fmt("filter_top kept %zu/%zu records (all reward 1) for 5 deltas; K=2 maps 0->R_0, 1->R_1", ones.size(),
                    data.size())};
}

// ---------------------------------------------------------------- shared seed runs (6-9, 11)

struct SeedRun {
  unsigned long long seed = 0;
  fs::path out;
  eval::Report gen, rank, threshold;
  double seconds = 0.0;
};

pipeline::RunConfig direction_config(unsigned long long seed) {
  auto c = pipeline::RunConfig::defaults("desk");
  c.seed = seed;
  c.eval.perplexity = false;
  return c;
}

const std::vector<SeedRun>& seed_runs() {
  static std::vector<SeedRun> runs = [] {
    std::vector<SeedRun> out;
    for (unsigned long long s = 1; s <= 5; ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      SeedRun r;
      r.seed = s;
      r.out = g_paths.work / ("seed" + std::to_string(s));
      fs::remove_all(r.out);
      pipeline::Pipeline p(direction_config(s), r.out);
      p.gen_corpus();
      p.train_tf();
      p.gen_offline();
      for (const auto& m : p.config().methods) p.train(m);
      std::vector<std::string> methods = {"tf"};
      methods.insert(methods.end(), p.config().methods.begin(), p.config().methods.end());
      r.gen = p.eval_gen(methods);
      r.rank = p.eval_rank(methods);
      r.threshold = p.ablate("threshold");
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << fmt("  seed %llu pipeline finished in %.0fs\n", s, r.seconds);
      out.push_back(std::move(r));
    }
    return out;
  }();
  return runs;
}

double click_of(const eval::Report& r, const std::string& method) {
  for (const auto& g : r.generation) {
    if (g.method == method) return g.click;
  }
  throw std::runtime_error("no generation row for " + method);
}

double rank_of(const eval::Report& r, const std::string& method) {
  for (const auto& g : r.ranker) {
    if (g.method == method) return g.mean_reward;
  }
  throw std::runtime_error("no ranker row for " + method);
}

Outcome end_to_end_direction() {
  const auto& runs = seed_runs();
  if (direction_config(1).synthetic.num_conversations < 500) return {false, "corpus below 500 conversations"};
  int ok = 0;
  double total = 0.0;
  std::string detail;
  for (const auto& r : runs) {
    const double tf = click_of(r.gen, "tf"), dt = click_of(r.gen, "dt"), top = click_of(r.gen, "tf-top");
    ok += dt > tf && top > tf;
    total += r.seconds;
    detail += fmt("s%llu TF %.3f DT %.3f Top %.3f; ", r.seed, tf, dt, top);
  }
  return {ok >= 4, detail + fmt("%d/5 seeds with DT and TF-Top > TF (need 4), %.0fs for all runs", ok, total)};
}

Outcome ranker_direction() {
  int ok = 0;
  bool bounded = true;
  std::string detail;
  for (const auto& r : seed_runs()) {
    const double tf = rank_of(r.rank, "tf"), ilql = rank_of(r.rank, "ilql"), orc = rank_of(r.rank, "oracle");
    ok += ilql >= tf;
    for (const auto& row : r.rank.ranker) bounded = bounded && row.mean_reward <= orc + 1e-12;
    detail += fmt("s%llu TF %.3f ILQL %.3f oracle %.3f; ", r.seed, tf, ilql, orc);
  }
  return {ok >= 4 && bounded,
          detail + fmt("%d/5 seeds ILQL >= TF (need 4), oracle bound %s", ok, bounded ? "holds" : "VIOLATED")};
}

Outcome topk_monotone() {
  int curves = 0, bad = 0;
  for (const auto& r : seed_runs()) {
    // The emitted CSV is the artifact under test.
    std::ifstream in(r.out / "reports" / "topk.csv");
    if (!in) return {false, "missing " + (r.out / "reports" / "topk.csv").string()};
    std::string line;
    std::getline(in, line);
    std::map<std::string, std::vector<double>> by_method;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string method, seed, k, reward;
      std::getline(ss, method, ',');
      std::getline(ss, seed, ',');
      std::getline(ss, k, ',');
      std::getline(ss, reward, ',');
      by_method[method + "/" + seed].push_back(std::stod(reward));
    }
    for (const auto& [m, ys] : by_method) {
      ++curves;
      for (std::size_t i = 1; i < ys.size(); ++i) {
        if (ys[i] < ys[i - 1]) {
          ++bad;
          break;
        }
      }
    }
  }
  return {curves > 0 && bad == 0, fmt("%d emitted curves, %d decreasing", curves, bad)};
}

Outcome threshold_peak() {
  int ok = 0;
  std::string detail;
  for (const auto& r : seed_runs()) {
    const auto& pts = r.threshold.ablations.at("threshold");
    std::vector<double> ys;
    for (const auto& p : pts) ys.push_back(p.value);
    const double ends = std::max(ys.front(), ys.back());
    bool peak = false;
    for (std::size_t i = 1; i + 1 < ys.size(); ++i) peak = peak || ys[i] >= ends;
    ok += peak;
    detail += fmt("s%llu [", r.seed);
    for (double y : ys) detail += fmt("%.3f ", y);
    detail.back() = ']';
    detail += "; ";
  }
  return {ok >= 4, detail + fmt("%d/5 seeds with an interior peak (need 4)", ok)};
}

// ---------------------------------------------------------------- 10

Outcome quark_bookkeeping() {
  corpus::SyntheticTaskSpec spec;
  spec.num_conversations = 60;
  spec.seed = 21;
  const auto convs = corpus::generate_synthetic_corpus(spec);
  const auto vocab = corpus::Vocab::build(convs, 2);
  const rewards::RewardModel reward(rewards::RewardSpec{}, vocab);
  const auto pairs = corpus::pairs_from_conversations(convs, vocab, 24);
  const std::vector<corpus::ContextResponsePair> ctx(pairs.begin(), pairs.begin() + 20);
  policy::CausalLMConfig mc;
  mc.vocab_size = vocab.size();
  mc.dim = 16;
  mc.layers = 1;
  mc.heads = 2;
  mc.block = 48;
  policy::PolicyModel beta(mc, 4);
  train::OfflineGenConfig gc;
  gc.n_model = 2;
  const auto base = train::generate_offline_dataset(beta, ctx, reward, vocab, gc);
  train::SupervisedConfig sc;
  sc.epochs = 4;
  sc.lr = 1e-3;
  sc.batch_size = 8;
  const train::BinQuantizer q(2);

  train::QuarkConfig qc;
  qc.epochs = 4;
  qc.collect_per_epoch = 25;
  auto grown = base;
  policy::PolicyModel m = beta;
  train::quark_loop(m, grown, base, ctx, reward, q, vocab, sc, qc);
  const bool sizes = grown.size() == base.size() + 4 * 25;

  qc.collect_per_epoch = 0;
  auto fixed = base;
  policy::PolicyModel a = beta, b = beta;
  const auto ql = train::quark_loop(a, fixed, base, ctx, reward, q, vocab, sc, qc);
  const auto dl = train::train_dt(b, base, base, q, vocab, sc);
  const bool same = ql.train.step_loss == dl.step_loss && a.to_json() == b.to_json();
  return {sizes && same, fmt("size %zu = %zu + 4*25: %s; collect 0 vs DT over %zu steps: %s", grown.size(), base.size(),
                             sizes ? "yes" : "no", dl.step_loss.size(), same ? "identical" : "DIFFERENT")};
}

// ---------------------------------------------------------------- 11

Outcome ppo_sanity() {
  const auto& runs = seed_runs();
  double worst_ratio = 0.0;
  int ok = 0;
  std::string detail;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto cfg = direction_config(runs[i].seed);
    pipeline::Pipeline p(cfg, runs[i].out);
    const auto& d = p.data();
    const rewards::RewardModel reward(cfg.reward, d.vocab);
    const auto beta = policy::load_checkpoint(p.tf_path());
    const double base = eval::greedy_reward(beta, d.test, reward, d.vocab, std::nullopt, false, cfg.eval.max_len);

    auto pc = cfg.ppo;
    pc.kl_coef = 1e4;
    pc.adaptive_kl = false;
    pc.seed = p.stage_seed("acceptance:ppo");
    policy::PolicyModel m = beta;
    m.add_value_head(pc.seed);
    const auto stats = train::train_ppo(m, beta, d.train, reward, d.vocab, pc);
    for (const auto& s : stats) worst_ratio = std::max(worst_ratio, s.first_epoch_ratio_dev);
    const double after = eval::greedy_reward(m, d.test, reward, d.vocab, std::nullopt, false, cfg.eval.max_len);
    const double noise = 2.0 * std::sqrt(std::max(base * (1.0 - base), 0.01) / static_cast<double>(d.test.size()));
    ok += std::abs(after - base) <= noise;
    detail += fmt("s%llu beta %.3f ppo %.3f (noise %.3f); ", runs[i].seed, base, after, noise);
  }
  return {worst_ratio < 1e-6 && ok == 3,
          detail + fmt("max first-epoch |ratio-1| %.1e (< 1e-6), %d/3 seeds within noise", worst_ratio, ok)};
}

// ---------------------------------------------------------------- 12

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const auto cfg = pipeline::RunConfig::load(g_paths.tiny);
  const auto a = g_paths.work / "det_a", b = g_paths.work / "det_b";
  for (const auto& d : {a, b}) {
    fs::remove_all(d);
    pipeline::Pipeline(cfg, d).run_all();
  }
  std::vector<fs::path> files = {"offline.jsonl", "offline_val.jsonl"};
  for (const auto& e : fs::directory_iterator(a / "reports")) {
    if (e.path().extension() == ".csv") files.push_back(fs::path("reports") / e.path().filename());
  }
  int same = 0;
  std::string diff;
  for (const auto& f : files) {
    if (fs::exists(b / f) && slurp(a / f) == slurp(b / f)) {
      ++same;
    } else {
      diff += " " + f.string();
    }
  }
  return {same == static_cast<int>(files.size()) && files.size() > 2,
          fmt("%d/%zu files byte-identical", same, files.size()) + (diff.empty() ? "" : "; differ:" + diff)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"offrl acceptance checks"};
  std::vector<int> only;
  app.add_option("--work", g_paths.work, "scratch directory for pipeline runs")->required();
  app.add_option("--fixtures", g_paths.fixtures, "directory with tree fixtures")->required();
  app.add_option("--tiny", g_paths.tiny, "small run config for the determinism check")->required();
  app.add_option("criteria", only, "criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(g_paths.work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient exactness", gradient_exactness},
      {"expectile oracle", expectile_oracle},
      {"ILQL vs DP", ilql_vs_dp},
      {"DT counting oracle", dt_counting_oracle},
      {"filter/quantizer exactness", filter_quantizer},
      {"end-to-end direction", end_to_end_direction},
      {"ranker direction", ranker_direction},
      {"top-k monotonicity", topk_monotone},
      {"threshold ablation shape", threshold_peak},
      {"Quark bookkeeping", quark_bookkeeping},
      {"PPO sanity", ppo_sanity},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << fmt("criterion %2d %s  %s [%.1fs]: ", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), secs)
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
