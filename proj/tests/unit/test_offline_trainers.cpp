#include "offrl/train/offline.hpp"
#include "offrl/nn/ops.hpp"
#include "offrl/train/trainers.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <memory>
#include <set>

using namespace offrl;
using corpus::TokenIds;

namespace {

struct World {
  corpus::Vocab vocab;
  std::vector<corpus::ContextResponsePair> train, val;
  policy::PolicyModel beta;
  rewards::RewardModel reward;

  // The reward model keeps a pointer to `vocab`, so a World never moves.
  explicit World(corpus::Vocab v) : vocab(std::move(v)), reward(rewards::RewardSpec{}, vocab) {}
};

const World& world() {
  static const std::unique_ptr<World> w = [] {
    corpus::SyntheticTaskSpec spec;
    spec.num_conversations = 40;
    spec.seed = 3;
    const auto convs = corpus::generate_synthetic_corpus(spec);
    auto m = std::make_unique<World>(corpus::Vocab::build(convs, 2));
    const auto sp = corpus::split_by_conversation(convs, 3);
    m->train = corpus::pairs_from_conversations(sp.train, m->vocab, 24);
    m->val = corpus::pairs_from_conversations(sp.val, m->vocab, 24);
    policy::CausalLMConfig mc;
    mc.vocab_size = m->vocab.size();
    mc.dim = 8;
    mc.layers = 1;
    mc.heads = 2;
    mc.block = 48;
    m->beta = policy::PolicyModel(mc, 1);
    train::SupervisedConfig sc;
    sc.epochs = 1;
    sc.lr = 3e-3;
    train::train_tf(m->beta, m->train, m->val, sc);
    return m;
  }();
  return *w;
}

train::OfflineRecord rec(std::string conv, int turn, double r, train::Source s, int idx) {
  train::OfflineRecord x;
  x.conversation_id = std::move(conv);
  x.turn_index = turn;
  x.context = {4, 2};
  x.response = {5, 1};
  x.reward = r;
  x.source = s;
  x.sample_index = idx;
  return x;
}

train::OfflineDataset binary_dataset() {
  train::OfflineDataset d;
  using train::Source;
  d.records = {rec("a", 0, 1, Source::human, 0), rec("a", 0, 0, Source::model, 1), rec("a", 0, 1, Source::model, 2),
               rec("b", 1, 0, Source::human, 0), rec("b", 1, 0, Source::model, 1), rec("b", 1, 1, Source::model, 2)};
  return d;
}

}  // namespace

TEST_CASE("filter_top keeps exactly the reward-1 records under binary rewards") {
  const auto d = binary_dataset();
  for (double delta : {0.0, 0.3, 0.5, 0.99}) {
    train::TopFilterConfig f;
    f.delta = delta;
    const auto top = train::filter_top(d, f);
    CHECK(top.size() == 3);
    for (const auto& r : top.records) CHECK(r.reward == 1.0);
  }
  train::TopFilterConfig all;
  all.delta = 1.0;
  CHECK(train::filter_top(d, all).size() == d.size());
}

TEST_CASE("quantile thresholds, human-only selection and the empty-result error") {
  const auto d = binary_dataset();
  train::TopFilterConfig q;
  q.quantile = 0.0;
  CHECK(train::filter_top(d, q).size() == 6);
  q.quantile = 0.75;
  CHECK(train::filter_top(d, q).size() == 3);
  train::TopFilterConfig h;
  h.human_only = true;
  const auto humans = train::filter_top(d, h);
  CHECK(humans.size() == 2);
  for (const auto& r : humans.records) CHECK(r.source == train::Source::human);

  train::OfflineDataset zeros;
  zeros.records = {rec("a", 0, 0, train::Source::human, 0)};
  train::TopFilterConfig strict;
  strict.delta = 0.0;
  CHECK_THROWS_WITH(train::filter_top(zeros, strict), doctest::Contains("lower the threshold"));

  train::TopFilterConfig both;
  both.delta = 0.1;
  both.quantile = 0.5;
  CHECK_THROWS(both.validate());
  CHECK_THROWS(train::TopFilterConfig{}.validate());
}

TEST_CASE("empirical quantile is lower-interpolated") {
  CHECK(train::empirical_quantile({3, 1, 2, 4}, 0.0) == 1);
  CHECK(train::empirical_quantile({3, 1, 2, 4}, 0.5) == 2);
  CHECK(train::empirical_quantile({3, 1, 2, 4}, 1.0) == 4);
  CHECK_THROWS(train::empirical_quantile({}, 0.5));
}

TEST_CASE("return quantizer bins") {
  const auto& w = world();
  const train::BinQuantizer q2(2);
  CHECK(train::quantize_return(0.0, q2, w.vocab) == w.vocab.bin(0));
  CHECK(train::quantize_return(1.0, q2, w.vocab) == w.vocab.bin(1));
  CHECK(q2.bin(0.5) == 1);
  CHECK(q2.bin(0.4999) == 0);
  CHECK_THROWS(train::quantize_return(1.5, q2, w.vocab));
  CHECK_THROWS(train::quantize_return(0.5, train::BinQuantizer(4), w.vocab));
  const train::BinQuantizer q4(std::vector<double>{0.0, 0.1, 0.5, 0.9, 1.0});
  CHECK(q4.bin(0.95) == 3);
  CHECK(q4.bin(1.0) == 3);
  CHECK(q4.bin(0.1) == 1);
  CHECK_THROWS(train::BinQuantizer(std::vector<double>{0.0, 0.6, 0.5, 1.0}));
  CHECK_THROWS(train::BinQuantizer(std::vector<double>{0.1, 1.0}));
}

TEST_CASE("canonical order is idempotent and survives a save/load round trip") {
  auto d = binary_dataset();
  std::swap(d.records[0], d.records[5]);
  std::swap(d.records[1], d.records[3]);
  d.canonicalize();
  const auto once = d.records;
  d.canonicalize();
  CHECK(d.records == once);
  CHECK(d.records.front().conversation_id == "a");
  CHECK(d.records.front().source == train::Source::human);
  d.provenance = {{"k", "v"}};
  const auto path = std::filesystem::temp_directory_path() / "offrl_offline_test.jsonl";
  d.save(path);
  const auto back = train::OfflineDataset::load(path);
  std::filesystem::remove(path);
  CHECK(back.records == d.records);
  CHECK(back.provenance == d.provenance);
}

TEST_CASE("validation rejects out-of-range rewards and contexts without a human record") {
  auto d = binary_dataset();
  CHECK_NOTHROW(d.validate());
  d.records[1].reward = 1.2;
  CHECK_THROWS(d.validate());
  auto e = binary_dataset();
  e.records.erase(e.records.begin());
  CHECK_THROWS(e.validate());
}

TEST_CASE("offline generation: one human and n model records per context, deterministic") {
  const auto& w = world();
  train::OfflineGenConfig gc;
  gc.n_model = 5;
  gc.seed = 9;
  const std::vector<corpus::ContextResponsePair> pairs(w.train.begin(), w.train.begin() + 10);
  const auto a = train::generate_offline_dataset(w.beta, pairs, w.reward, w.vocab, gc);
  const auto b = train::generate_offline_dataset(w.beta, pairs, w.reward, w.vocab, gc);
  CHECK(a.size() == 60);
  CHECK(a.records == b.records);
  CHECK_NOTHROW(a.validate());
  for (const auto& g : a.groups()) {
    REQUIRE(g.size() == 6);
    CHECK(g.front()->source == train::Source::human);
    // Human responses realize the target class, so they always score 1.
    CHECK(g.front()->reward == 1.0);
  }
}

TEST_CASE("context subsampling keeps whole groups") {
  const auto d = binary_dataset();
  CHECK(train::subsample_contexts(d, 1.0, 1).records == d.records);
  const auto half = train::subsample_contexts(d, 0.5, 1);
  CHECK(half.size() == 3);
  std::set<std::string> convs;
  for (const auto& r : half.records) convs.insert(r.conversation_id);
  CHECK(convs.size() == 1);
}

TEST_CASE("decision-transformer examples insert the bin token before the response") {
  const auto& w = world();
  const auto d = binary_dataset();
  const auto ex = train::dt_examples(d, train::BinQuantizer(2), w.vocab);
  REQUIRE(ex.size() == d.size());
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const auto& e = ex[i];
    CHECK(e.tokens[static_cast<std::size_t>(e.response_start) - 1] == w.vocab.bin(d.records[i].reward >= 0.5 ? 1 : 0));
    CHECK(e.tokens.size() == d.records[i].context.size() + 1 + d.records[i].response.size());
  }
}

TEST_CASE("supervised training is deterministic and lowers the loss") {
  const auto& w = world();
  const auto examples = train::pair_examples(w.train);
  policy::PolicyModel a = w.beta, b = w.beta;
  train::SupervisedConfig sc;
  sc.epochs = 2;
  sc.lr = 3e-3;
  sc.seed = 5;
  sc.keep_best = false;
  const double before = train::mean_token_nll(a, examples);
  const auto la = train::train_supervised(a, examples, {}, sc);
  const auto lb = train::train_supervised(b, examples, {}, sc);
  CHECK(la.step_loss == lb.step_loss);
  CHECK(a.to_json() == b.to_json());
  CHECK(train::mean_token_nll(a, examples) < before);
}

TEST_CASE("TF-Top equals TF-All when every record clears the threshold") {
  const auto& w = world();
  train::OfflineGenConfig gc;
  gc.n_model = 2;
  const std::vector<corpus::ContextResponsePair> pairs(w.train.begin(), w.train.begin() + 8);
  auto d = train::generate_offline_dataset(w.beta, pairs, w.reward, w.vocab, gc);
  for (auto& r : d.records) r.reward = 1.0;
  train::SupervisedConfig sc;
  sc.epochs = 1;
  sc.lr = 1e-3;
  sc.keep_best = false;
  train::TopFilterConfig f;
  f.delta = 0.0;
  policy::PolicyModel a = w.beta, b = w.beta;
  const auto la = train::train_tf_all(a, d, d, sc);
  const auto lb = train::train_tf_top(b, d, d, f, sc);
  CHECK(la.step_loss == lb.step_loss);
}

TEST_CASE("the ILQL loss vanishes at the exact fixed point of a one-step episode") {
  const auto& w = world();
  policy::PolicyModel m = w.beta;
  m.add_ilql_heads({}, 1);
  train::ILQLConfig cfg;
  cfg.alpha = 0.0;
  cfg.tau = 0.5;
  const TokenIds ctx = {w.vocab.sep()};
  const TokenIds action = {w.vocab.eos()};
  nn::Tape t;
  nn::Var h = m.hidden(t, ctx);
  const nn::Matrix blp = nn::log_softmax_rows(m.lm_logits(t, h).value());
  // Fresh heads give Q = V = 0, so with reward 0 every residual is zero.
  const auto loss = train::ilql_loss(m, t, h, blp, action, 0.0, cfg);
  CHECK(loss.td == doctest::Approx(0.0));
  CHECK(loss.expectile == doctest::Approx(0.0));
  nn::Tape t2;
  nn::Var h2 = m.hidden(t2, ctx);
  const auto loss1 = train::ilql_loss(m, t2, h2, blp, action, 1.0, cfg);
  CHECK(loss1.td == doctest::Approx(1.0));
}

TEST_CASE("ILQL training fits terminal rewards on a two-response dataset") {
  const auto& w = world();
  const auto& p = w.train.front();
  train::ILQLSequence good{p.context, p.response, 1.0};
  TokenIds other = {w.vocab.id("hold"), w.vocab.eos()};
  train::ILQLSequence bad{p.context, other, 0.0};
  policy::PolicyModel m = w.beta;
  train::ILQLConfig cfg;
  cfg.alpha = 0.0;
  cfg.gamma = 1.0;
  cfg.tau = 0.5;
  cfg.epochs = 3000;
  cfg.batch_size = 2;
  cfg.lr = 1e-2;
  train::train_ilql(m, {good, bad}, cfg);
  const auto vg = policy::ilql_values(m, p.context, p.response);
  const auto vb = policy::ilql_values(m, p.context, other);
  const auto last = static_cast<nn::Index>(p.response.size()) - 1;
  CHECK(vg.q(last, p.response.back()) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(std::abs(vb.q(0, other[0])) < 0.05);
  // Both responses start from the same state: V there is the median of {0, 1}.
  CHECK(vg.v[0] == doctest::Approx(0.5).epsilon(0.05));
  CHECK(train::critic_score(m, p.context, p.response, train::CriticScore::last_q) >
        train::critic_score(m, p.context, other, train::CriticScore::last_q));
}

TEST_CASE("PPO: first-epoch ratios are one and a zero-reward step leaves no advantage signal") {
  const auto& w = world();
  policy::PolicyModel m = w.beta;
  m.add_value_head(2);
  train::PPOConfig cfg;
  cfg.lr = 1e-3;
  cfg.rollout_batch = 4;
  std::vector<const corpus::ContextResponsePair*> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(&w.train[static_cast<std::size_t>(i)]);
  std::mt19937_64 rng(3);
  const auto s = train::ppo_step(m, w.beta, batch, w.reward, w.vocab, cfg, rng);
  CHECK(s.first_epoch_ratio_dev < 1e-6);
  CHECK(s.kl == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.kl_coef < 0.2);  // KL below target shrinks the coefficient

  policy::PolicyModel no_head = w.beta;
  CHECK_THROWS(train::ppo_step(no_head, w.beta, batch, w.reward, w.vocab, cfg, rng));
}

TEST_CASE("Quark grows the dataset by collect_per_epoch and reduces to DT without collection") {
  const auto& w = world();
  train::OfflineGenConfig gc;
  gc.n_model = 1;
  const std::vector<corpus::ContextResponsePair> pairs(w.train.begin(), w.train.begin() + 6);
  const auto base = train::generate_offline_dataset(w.beta, pairs, w.reward, w.vocab, gc);
  train::SupervisedConfig sc;
  sc.epochs = 3;
  sc.lr = 1e-3;
  sc.batch_size = 4;
  const train::BinQuantizer q(2);

  train::QuarkConfig qc;
  qc.epochs = 3;
  qc.collect_per_epoch = 5;
  auto grown = base;
  policy::PolicyModel m = w.beta;
  const auto log = train::quark_loop(m, grown, base, pairs, w.reward, q, w.vocab, sc, qc);
  CHECK(grown.size() == base.size() + 15);
  CHECK(log.dataset_sizes == std::vector<std::size_t>{base.size() + 5, base.size() + 10, base.size() + 15});

  qc.collect_per_epoch = 0;
  auto fixed = base;
  policy::PolicyModel a = w.beta, b = w.beta;
  const auto ql = train::quark_loop(a, fixed, base, pairs, w.reward, q, w.vocab, sc, qc);
  const auto dl = train::train_dt(b, base, base, q, w.vocab, sc);
  CHECK(ql.train.step_loss == dl.step_loss);
  CHECK(a.to_json() == b.to_json());
}

TEST_CASE("the implicit-policy critic score reduces to the behavior log-probability at eta = 0") {
  const auto& w = world();
  const auto& p = w.train.front();
  policy::PolicyModel m = w.beta;
  m.add_ilql_heads({0.0, false, 0.005}, 4);
  for (auto& [name, prm] : m.params()) {
    if (name.rfind("ilql.", 0) == 0) prm.value.setRandom();
  }
  const double beta_lp = policy::log_prob(w.beta, p.context, p.response);
  CHECK(train::critic_score(m, p.context, p.response, train::CriticScore::implicit_log_prob) ==
        doctest::Approx(beta_lp).epsilon(1e-12));
  m.ilql_config().eta = 1.0;
  CHECK(train::critic_score(m, p.context, p.response, train::CriticScore::implicit_log_prob) !=
        doctest::Approx(beta_lp));
  CHECK(train::critic_score_from_name("implicit_log_prob") == train::CriticScore::implicit_log_prob);
}
