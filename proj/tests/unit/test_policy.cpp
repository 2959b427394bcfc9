#include "offrl/policy/policy.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace offrl;
using corpus::TokenIds;

namespace {

corpus::Vocab tiny_vocab() {
  corpus::Conversation c{"c0",
                         {{corpus::Speaker::user, {"a", "b", "c"}, std::nullopt, {}},
                          {corpus::Speaker::system, {"d", "e", "f", "g"}, std::nullopt, {}}}};
  return corpus::Vocab::build({c}, 2);
}

policy::CausalLMConfig small_config(int vocab, policy::Backbone b = policy::Backbone::attention) {
  policy::CausalLMConfig c;
  c.vocab_size = vocab;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.block = 24;
  c.backbone = b;
  return c;
}

}  // namespace

TEST_CASE("logits are causal for both backbones") {
  for (auto b : {policy::Backbone::attention, policy::Backbone::gru}) {
    policy::PolicyModel m(small_config(12, b), 3);
    const TokenIds x = {4, 5, 6, 7, 8};
    TokenIds y = x;
    y[4] = 9;
    const auto lx = m.logits(x);
    const auto ly = m.logits(y);
    CHECK((lx.topRows(4) - ly.topRows(4)).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK((lx.row(4) - ly.row(4)).cwiseAbs().maxCoeff() > 1e-9);
  }
}

TEST_CASE("a zero output head scores every response as uniform") {
  auto cfg = small_config(12);
  cfg.zero_init_head = true;
  policy::PolicyModel m(cfg, 1);
  const TokenIds ctx = {4, 5, 2};
  const TokenIds resp = {6, 7, 1};
  CHECK(policy::log_prob(m, ctx, resp) == doctest::Approx(-3.0 * std::log(12.0)));
  const auto per_token = policy::token_log_probs(m, ctx, resp);
  REQUIRE(per_token.size() == 3);
  for (double lp : per_token) CHECK(lp == doctest::Approx(-std::log(12.0)));
}

TEST_CASE("block overflow is an error") {
  policy::PolicyModel m(small_config(12), 1);
  const TokenIds long_ctx(30, 4);
  CHECK_THROWS(m.logits(long_ctx));
}

TEST_CASE("greedy decoding returns identical copies and stops at EOS or max_len") {
  const auto vocab = tiny_vocab();
  policy::PolicyModel m(small_config(vocab.size()), 2);
  policy::DecodeConfig d;
  d.n = 3;
  d.max_len = 5;
  std::mt19937_64 rng(0);
  const TokenIds ctx = {vocab.id("a"), vocab.sep()};
  const auto out = policy::sample_responses(m, ctx, d, std::nullopt, vocab, rng);
  REQUIRE(out.size() == 3);
  CHECK(out[0] == out[1]);
  CHECK(out[1] == out[2]);
  CHECK(out[0].size() <= 5);
  for (std::size_t i = 0; i + 1 < out[0].size(); ++i) CHECK(out[0][i] != vocab.eos());
  for (int t : out[0]) CHECK((!vocab.is_special(t) || t == vocab.eos()));
}

TEST_CASE("sampling is reproducible from the seed") {
  const auto vocab = tiny_vocab();
  policy::PolicyModel m(small_config(vocab.size()), 2);
  policy::DecodeConfig d;
  d.mode = policy::DecodeConfig::Mode::sample;
  d.n = 4;
  const TokenIds ctx = {vocab.id("b"), vocab.sep()};
  std::mt19937_64 r1(11), r2(11);
  CHECK(policy::sample_responses(m, ctx, d, std::nullopt, vocab, r1) ==
        policy::sample_responses(m, ctx, d, std::nullopt, vocab, r2));
}

TEST_CASE("the implicit policy with eta = 0 equals the behavior policy") {
  const auto vocab = tiny_vocab();
  policy::PolicyModel m(small_config(vocab.size()), 5);
  m.add_ilql_heads({0.0, false, 0.005}, 9);
  // Random Q weights so Q - V differs across actions.
  for (auto& [name, p] : m.params()) {
    if (name.rfind("ilql.q.", 0) == 0) p.value.setRandom();
  }
  const TokenIds ctx = {vocab.id("a"), vocab.id("b"), vocab.sep()};
  policy::DecodeConfig plain, implicit;
  implicit.implicit = true;
  const auto a = policy::next_token_log_probs(m, ctx, plain, vocab);
  const auto b = policy::next_token_log_probs(m, ctx, implicit, vocab);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isfinite(a[i])) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }

  m.ilql_config().eta = 1.0;
  const auto c = policy::next_token_log_probs(m, ctx, implicit, vocab);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isfinite(a[i])) diff = std::max(diff, std::abs(a[i] - c[i]));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("ILQL values have one V per state plus the terminal zero") {
  policy::PolicyModel m(small_config(12), 5);
  m.add_ilql_heads({}, 1);
  const TokenIds ctx = {4, 2};
  const TokenIds resp = {5, 6, 1};
  const auto v = policy::ilql_values(m, ctx, resp);
  CHECK(v.q.rows() == 3);
  CHECK(v.q.cols() == 12);
  REQUIRE(v.v.size() == 4);
  CHECK(v.v.back() == 0.0);
  // Fresh heads have zero output layers.
  CHECK(v.q.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("checkpoints round-trip parameters, heads and metadata") {
  policy::PolicyModel m(small_config(12), 7);
  m.add_ilql_heads({0.5, true, 0.01}, 3);
  m.add_value_head(4);
  const auto path = std::filesystem::temp_directory_path() / "offrl_test_ckpt.json";
  policy::save_checkpoint(path, m, {"vh", {{"k", 1}}});
  policy::CheckpointMeta meta;
  const auto back = policy::load_checkpoint(path, &meta);
  std::filesystem::remove(path);
  CHECK(meta.vocab_hash == "vh");
  CHECK(meta.provenance["k"] == 1);
  CHECK(back.has_ilql_heads());
  CHECK(back.has_value_head());
  CHECK(back.ilql_config().eta == 0.5);
  const TokenIds x = {4, 5, 6};
  CHECK((m.logits(x) - back.logits(x)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m.to_json() == back.to_json());
}

TEST_CASE("loading a non-checkpoint file fails clearly") {
  const auto path = std::filesystem::temp_directory_path() / "offrl_not_ckpt.json";
  {
    std::ofstream(path) << "{\"format\": \"other\"}";
  }
  CHECK_THROWS_WITH(policy::load_checkpoint(path), doctest::Contains("not a checkpoint"));
  std::filesystem::remove(path);
}
