#include "offrl/pipeline/pipeline.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace offrl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

pipeline::RunConfig tiny_config() { return pipeline::RunConfig::load(fs::path(OFFRL_TEST_DATA) / "tiny_config.json"); }

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("offrl_pipe_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool contains_problem(const pipeline::ConfigError& e, const std::string& needle) {
  for (const auto& p : e.problems()) {
    if (p.find(needle) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("presets validate and survive a JSON round trip") {
  for (const std::string preset : {"paper", "desk"}) {
    const auto c = pipeline::RunConfig::defaults(preset);
    CHECK_NOTHROW(c.validate());
    CHECK(pipeline::RunConfig::from_json(c.to_json()).to_json() == c.to_json());
  }
  const auto paper = pipeline::RunConfig::defaults("paper");
  CHECK(paper.model.block == 1024);
  CHECK(paper.ilql.alpha == 0.05);
  CHECK(paper.ilql.tau == 0.7);
  CHECK(paper.ppo.value_coef == 2.3);
  CHECK_THROWS_AS(pipeline::RunConfig::defaults("huge"), pipeline::ConfigError);
}

TEST_CASE("config errors are reported together") {
  json j = {{"preset", "desk"},
            {"colour", "blue"},
            {"fraction", 1.5},
            {"methods", {"dt", "sarsa"}},
            {"ilql", {{"tau", "high"}}},
            {"eval", {{"topk_max", -1}}}};
  try {
    pipeline::RunConfig::from_json(j);
    FAIL("expected a ConfigError");
  } catch (const pipeline::ConfigError& e) {
    CHECK(e.problems().size() >= 5);
    CHECK(contains_problem(e, "colour"));
    CHECK(contains_problem(e, "fraction"));
    CHECK(contains_problem(e, "sarsa"));
    CHECK(contains_problem(e, "tau"));
    CHECK(contains_problem(e, "topk_max"));
  }
}

TEST_CASE("the output root comes from the flag, then the environment") {
  ::setenv(pipeline::kOutEnv, "/tmp/from_env", 1);
  CHECK(pipeline::resolve_out_dir("") == fs::path("/tmp/from_env"));
  CHECK(pipeline::resolve_out_dir("/tmp/from_flag") == fs::path("/tmp/from_flag"));
  ::unsetenv(pipeline::kOutEnv);
  CHECK(pipeline::resolve_out_dir("") == fs::path("offrl-out"));
}

TEST_CASE("a held lock rejects a second run and a dead holder's lock is taken over") {
  const auto dir = fresh_dir("lock");
  fs::create_directories(dir);
  {
    pipeline::RunLock a(dir);
    CHECK(fs::exists(pipeline::RunLock::path_for(dir)));
    CHECK_THROWS_AS(pipeline::RunLock{dir}, pipeline::RunLocked);
  }
  CHECK_FALSE(fs::exists(pipeline::RunLock::path_for(dir)));
  {
    // No process has this pid on Linux (pid_max is at most 2^22).
    std::ofstream(pipeline::RunLock::path_for(dir)) << 99999999;
  }
  CHECK_NOTHROW(pipeline::RunLock{dir});
  fs::remove_all(dir);
}

TEST_CASE("stages report the missing or stale upstream and the command to run") {
  const auto dir = fresh_dir("stages");
  pipeline::Pipeline p(tiny_config(), dir);
  try {
    p.train("dt");
    FAIL("expected MissingArtifact");
  } catch (const pipeline::MissingArtifact& e) {
    CHECK(e.command() == "gen-corpus");
    CHECK(std::string(e.what()).find("run gen-corpus first") != std::string::npos);
  }
  p.gen_corpus();
  p.train_tf();
  try {
    p.train("dt");
    FAIL("expected MissingArtifact");
  } catch (const pipeline::MissingArtifact& e) {
    CHECK(e.command() == "gen-offline");
  }
  p.gen_offline();
  CHECK_NOTHROW(p.train("dt"));
  CHECK(fs::exists(p.model_path("dt")));

  // A changed behavior-model setting invalidates tf.ckpt and everything after it.
  auto changed = tiny_config();
  changed.tf.lr *= 2.0;
  CHECK(pipeline::Pipeline(changed, dir).stage_hash("tf") != p.stage_hash("tf"));
  CHECK(pipeline::Pipeline(changed, dir).stage_hash("corpus") == p.stage_hash("corpus"));
  pipeline::Pipeline stale(changed, dir);
  CHECK_THROWS_AS(stale.gen_offline(), pipeline::MissingArtifact);

  // A model trained on an earlier offline file is stale once the file changes.
  {
    std::ofstream(p.offline_path(), std::ios::app) << "\n";
  }
  pipeline::Pipeline again(tiny_config(), dir);
  try {
    again.eval_gen({"dt"});
    FAIL("expected MissingArtifact");
  } catch (const pipeline::MissingArtifact& e) {
    CHECK(e.command() == "train dt");
  }
  fs::remove_all(dir);
}

TEST_CASE("run-all is byte-reproducible for a fixed seed") {
  const auto a = fresh_dir("a");
  const auto b = fresh_dir("b");
  pipeline::Pipeline(tiny_config(), a).run_all();
  pipeline::Pipeline(tiny_config(), b).run_all();
  for (const auto& name : {"offline.jsonl", "reports/generation.csv", "reports/ranker.csv", "reports/topk.csv"}) {
    REQUIRE(fs::exists(a / name));
    CHECK(slurp(a / name) == slurp(b / name));
  }
  const auto meta = json::parse(slurp(a / "corpus.meta.json"));
  CHECK(meta["provenance"]["stage"] == "corpus");
  const auto ckpt = json::parse(slurp(a / "models" / "ilql.ckpt"));
  CHECK(ckpt.dump().find(pipeline::file_sha256(a / "offline.jsonl")) != std::string::npos);

  auto other = tiny_config();
  other.seed += 1;
  const auto c = fresh_dir("c");
  pipeline::Pipeline(other, c).run_all();
  CHECK(slurp(a / "offline.jsonl") != slurp(c / "offline.jsonl"));
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}
