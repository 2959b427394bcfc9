#include "offrl/eval/eval.hpp"
#include "offrl/eval/report.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

using namespace offrl;

namespace {

struct Fixture {
  corpus::Vocab vocab;
  std::vector<corpus::ContextResponsePair> test;
  policy::PolicyModel model;
  rewards::RewardModel reward;

  explicit Fixture(corpus::Vocab v) : vocab(std::move(v)), reward(rewards::RewardSpec{}, vocab) {}
};

const Fixture& fixture() {
  static const std::unique_ptr<Fixture> f = [] {
    corpus::SyntheticTaskSpec spec;
    spec.num_conversations = 30;
    spec.seed = 5;
    const auto convs = corpus::generate_synthetic_corpus(spec);
    auto x = std::make_unique<Fixture>(corpus::Vocab::build(convs, 2));
    x->test = corpus::pairs_from_conversations(convs, x->vocab, 24);
    x->test.resize(12);
    policy::CausalLMConfig mc;
    mc.vocab_size = x->vocab.size();
    mc.dim = 8;
    mc.layers = 1;
    mc.heads = 1;
    mc.block = 48;
    x->model = policy::PolicyModel(mc, 2);
    return x;
  }();
  return *f;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

eval::GenerationReport sample_report(const std::string& method) {
  eval::GenerationReport r;
  r.method = method;
  r.seed = 3;
  r.contexts = 10;
  r.click = 0.5;
  r.histogram[0] = 0.25;
  r.histogram[9] = 0.75;
  r.topk = {0.5, 0.6, 0.6};
  r.perplexity = std::nan("");
  return r;
}

}  // namespace

TEST_CASE("similarity histogram bins are [k/10, (k+1)/10) with the top bin closed") {
  CHECK(eval::histogram_bin(0.0) == 0);
  CHECK(eval::histogram_bin(0.0999) == 0);
  CHECK(eval::histogram_bin(0.1) == 1);
  CHECK(eval::histogram_bin(0.95) == 9);
  CHECK(eval::histogram_bin(1.0) == 9);
  CHECK_THROWS(eval::histogram_bin(-0.01));
  CHECK_THROWS(eval::histogram_bin(1.01));
}

TEST_CASE("generation reports: histogram mass, monotone top-k curve, determinism") {
  const auto& f = fixture();
  eval::GenerationOptions o;
  o.topk_max = 4;
  o.seed = 9;
  o.max_len = 6;
  const auto a = eval::eval_generation(f.model, f.test, f.reward, f.vocab, o);
  const auto b = eval::eval_generation(f.model, f.test, f.reward, f.vocab, o);
  double mass = 0.0;
  for (double m : a.histogram) mass += m;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
  REQUIRE(a.topk.size() == 4);
  for (std::size_t k = 1; k < a.topk.size(); ++k) CHECK(a.topk[k] >= a.topk[k - 1]);
  CHECK(a.topk == b.topk);
  CHECK(a.click == b.click);
  CHECK(std::isnan(a.perplexity));
  o.reference = &f.model;
  CHECK(std::isfinite(eval::eval_generation(f.model, f.test, f.reward, f.vocab, o).perplexity));
  CHECK_THROWS(eval::eval_generation(f.model, {}, f.reward, f.vocab, o));
}

TEST_CASE("ranking: oracle picks the best candidate, ties go to the lowest index") {
  const auto& f = fixture();
  const auto set = eval::make_candidates(f.model, f.test, f.reward, f.vocab, 4, 6, 1);
  REQUIRE(set.candidates.size() == f.test.size());
  CHECK(set.hash() == eval::make_candidates(f.model, f.test, f.reward, f.vocab, 4, 6, 1).hash());

  const auto oracle = eval::eval_ranker("oracle", set, f.test, eval::oracle_scorer(set));
  double best_mean = 0.0;
  for (const auto& r : set.rewards) best_mean += *std::max_element(r.begin(), r.end()) / static_cast<double>(r.size() ? set.rewards.size() : 1);
  CHECK(oracle.mean_reward == doctest::Approx(best_mean));

  const auto flat = eval::eval_ranker(
      "flat", set, f.test, [](const auto&, const auto&, std::size_t, std::size_t) { return 1.0; });
  for (int p : flat.picks) CHECK(p == 0);

  for (const auto& scorer : {eval::log_prob_scorer(f.model), eval::random_scorer(4)}) {
    CHECK(eval::eval_ranker("x", set, f.test, scorer).mean_reward <= oracle.mean_reward + 1e-12);
  }
  const std::vector<corpus::ContextResponsePair> shorter(f.test.begin(), f.test.begin() + 2);
  CHECK_THROWS(eval::eval_ranker("x", set, shorter, eval::oracle_scorer(set)));
}

TEST_CASE("report CSVs have stable headers and one row per curve point") {
  const std::vector<eval::GenerationReport> rows = {sample_report("tf"), sample_report("dt")};
  const auto gen = eval::generation_csv(rows);
  CHECK(gen.rfind("method,seed,fraction,contexts,click,token_f1,bleu,perplexity\n", 0) == 0);
  CHECK(gen.find("tf,3,1.000000,10,0.500000,0.000000,0.000000,nan\n") != std::string::npos);

  const auto hist = eval::histogram_csv(rows);
  std::istringstream in(hist);
  std::string line;
  std::getline(in, line);
  CHECK(line == "method,seed,bin_lo,bin_hi,mass");
  double tf_mass = 0.0;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    if (line.rfind("tf,", 0) == 0) tf_mass += std::stod(line.substr(line.rfind(',') + 1));
  }
  CHECK(lines == 2 * eval::kHistogramBins);
  CHECK(tf_mass == doctest::Approx(1.0));

  const auto topk = eval::topk_csv(rows);
  CHECK(std::count(topk.begin(), topk.end(), '\n') == 1 + 2 * 3);
  CHECK(eval::ranker_csv({{"ilql", 2, 0.25, {}, "abc"}}) == "method,seed,mean_reward,candidates_hash\nilql,2,0.250000,abc\n");
  CHECK(eval::ablation_csv({{"tf_top", 0.5, 0.75, 12}}) == "method,param,value,records\ntf_top,0.500000,0.750000,12\n");
}

TEST_CASE("emit_report writes identical bytes twice and fails on an unwritable directory") {
  eval::Report r;
  r.generation = {sample_report("tf"), sample_report("dt")};
  r.ranker = {{"tf", 3, 0.4, {0, 1}, "h"}, {"oracle", 3, 0.9, {1, 1}, "h"}};
  r.ablations["threshold"] = {{"tf_top", 0.0, 0.5, 10}, {"tf_top", 1.0, 0.6, 2}};
  const auto dir = std::filesystem::temp_directory_path() / "offrl_report_test";
  std::filesystem::remove_all(dir);
  const auto files = eval::emit_report(r, dir / "a");
  eval::emit_report(r, dir / "b");
  CHECK(files.size() >= 9);
  for (const auto& p : files) {
    CHECK(slurp(p) == slurp(dir / "b" / p.filename()));
    if (p.extension() == ".svg") {
      const auto s = slurp(p);
      CHECK(s.rfind("<svg", 0) == 0);
      CHECK(s.find("</svg>") != std::string::npos);
    }
  }
  {
    std::ofstream(dir / "plain_file") << "x";
  }
  CHECK_THROWS(eval::emit_report(r, dir / "plain_file" / "sub"));
  std::filesystem::remove_all(dir);
}
