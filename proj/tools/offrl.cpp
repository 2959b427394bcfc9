// Command-line entry point for the offline RL dialogue pipeline.

#include "offrl/pipeline/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using offrl::pipeline::ConfigError;
using offrl::pipeline::MissingArtifact;
using offrl::pipeline::Pipeline;
using offrl::pipeline::RunConfig;
using offrl::pipeline::RunLock;
using offrl::pipeline::RunLocked;

enum ExitCode : int {
  kOk = 0,
  kRuntimeFailure = 1,
  kConfigError = 2,
  kMissingArtifact = 3,
  kLocked = 4,
};

struct Flags {
  std::string config;
  std::optional<unsigned long long> seed;
  std::string out;
  std::optional<double> fraction;
  std::vector<std::string> methods;
  std::string scorer_cmd;
};

RunConfig resolve_config(const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError({"cannot open config file " + f.config});
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError({f.config + ": " + e.what()});
    }
    if (!j.is_object()) throw ConfigError({f.config + ": config must be a JSON object"});
  }
  if (f.seed) j["seed"] = *f.seed;
  if (f.fraction) j["fraction"] = *f.fraction;
  if (!f.methods.empty()) j["methods"] = f.methods;
  if (!f.scorer_cmd.empty()) {
    j["reward"]["scorer"] = "external";
    j["reward"]["scorer_cmd"] = f.scorer_cmd;
  }
  return RunConfig::from_json(j);
}

void print_generation(const offrl::eval::Report& r) {
  std::printf("%-8s %8s %8s %8s %10s\n", "method", "click", "f1", "bleu", "ppl");
  for (const auto& g : r.generation) {
    std::printf("%-8s %8.4f %8.4f %8.4f %10.3f\n", g.method.c_str(), g.click, g.token_f1, g.bleu, g.perplexity);
  }
}

void print_ranker(const offrl::eval::Report& r) {
  std::printf("%-8s %12s\n", "method", "mean reward");
  for (const auto& k : r.ranker) std::printf("%-8s %12.4f\n", k.method.c_str(), k.mean_reward);
}

void print_ablations(const offrl::eval::Report& r) {
  for (const auto& [name, pts] : r.ablations) {
    std::printf("%s\n%-8s %8s %8s %8s\n", name.c_str(), "method", "param", "value", "records");
    for (const auto& p : pts) std::printf("%-8s %8.3f %8.4f %8zu\n", p.method.c_str(), p.param, p.value, p.records);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline reinforcement learning for dialogue response generation"};
  app.require_subcommand(1);
  app.fallthrough();

  Flags flags;
  app.add_option("--config", flags.config, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Root seed; every stage seed derives from it");
  app.add_option("--out", flags.out, std::string("Output directory (default: $") + offrl::pipeline::kOutEnv +
                                         " or ./offrl-out)");
  app.add_option("--fraction", flags.fraction, "Share of offline contexts used by stage-3 trainers");
  app.add_option("--method", flags.methods, "Method to evaluate (repeatable); overrides the config's methods")
      ->delimiter(',');
  app.add_option("--scorer-cmd", flags.scorer_cmd, "External similarity scorer command");

  auto* gen_corpus = app.add_subcommand("gen-corpus", "Write the corpus and vocabulary");
  auto* train_tf = app.add_subcommand("train-tf", "Stage 1: teacher-force the behavior policy");
  auto* gen_offline = app.add_subcommand("gen-offline", "Stage 2: sample and score the offline dataset");
  auto* train = app.add_subcommand("train", "Stage 3: fine-tune with one method");
  std::string method;
  train->add_option("method", method, "tf-all, tf-top, dt, ilql, ppo or quark")
      ->required()
      ->check(CLI::IsMember(offrl::pipeline::kMethods));
  auto* eval_gen = app.add_subcommand("eval-gen", "Evaluate the methods as generators");
  auto* eval_rank = app.add_subcommand("eval-rank", "Evaluate the methods as rankers of behavior samples");
  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  std::string which;
  ablate->add_option("sweep", which, "threshold, alpha or fraction")
      ->required()
      ->check(CLI::IsMember({"threshold", "alpha", "fraction"}));
  auto* run_all = app.add_subcommand("run-all", "Every stage, then eval-gen and eval-rank");
  auto* show_config = app.add_subcommand("show-config", "Print the resolved config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    const RunConfig cfg = resolve_config(flags);
    if (show_config->parsed()) {
      std::cout << cfg.to_json().dump(2) << "\n";
      return kOk;
    }
    const auto out = offrl::pipeline::resolve_out_dir(flags.out);
    RunLock lock(out);
    Pipeline p(cfg, out);

    // Evaluations default to the stage-1 baseline plus the configured methods.
    std::vector<std::string> methods = {"tf"};
    methods.insert(methods.end(), cfg.methods.begin(), cfg.methods.end());
    if (!flags.methods.empty()) methods = flags.methods;

    if (gen_corpus->parsed()) {
      p.gen_corpus();
    } else if (train_tf->parsed()) {
      p.train_tf();
    } else if (gen_offline->parsed()) {
      p.gen_offline();
    } else if (train->parsed()) {
      p.train(method);
    } else if (eval_gen->parsed()) {
      print_generation(p.eval_gen(methods));
    } else if (eval_rank->parsed()) {
      print_ranker(p.eval_rank(methods));
    } else if (ablate->parsed()) {
      print_ablations(p.ablate(which));
    } else if (run_all->parsed()) {
      p.run_all();
      std::cout << "reports written to " << p.reports_dir().string() << "\n";
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const RunLocked& e) {
    std::cerr << "locked: " << e.what() << "\n";
    return kLocked;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}
