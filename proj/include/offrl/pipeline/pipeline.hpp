#pragma once

// The three-stage pipeline over an output directory:
//   gen-corpus   corpus.jsonl, corpus.meta.json (vocabulary, provenance)
//   train-tf     tf.ckpt (behavior policy), ref.ckpt (perplexity reference)
//   gen-offline  offline.jsonl, offline_val.jsonl
//   train <m>    models/<m>.ckpt, models/<m>.log.json
//   eval-gen     reports/generation.csv, histogram.csv, topk.csv, plots
//   eval-rank    reports/ranker.csv
//   ablate <a>   reports/ablation_<a>.csv
//
// Every artifact records a hash of the config sections it depends on and the
// SHA-256 of each upstream file. Loading an artifact whose record disagrees
// with the current config or files fails with MissingArtifact naming the
// command to rerun.

#include "offrl/eval/eval.hpp"
#include "offrl/eval/report.hpp"
#include "offrl/pipeline/config.hpp"

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace offrl::pipeline {

/// An upstream artifact is absent or stale.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::string& message, std::string command)
      : std::runtime_error(message), command_(std::move(command)) {}
  /// The command that (re)creates the artifact.
  const std::string& command() const { return command_; }

 private:
  std::string command_;
};

/// Another process holds the output directory.
class RunLocked : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Exclusive lock on an output directory, held for the object's lifetime.
/// A lock left behind by a process that no longer exists is taken over.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

  static std::filesystem::path path_for(const std::filesystem::path& dir);

 private:
  std::filesystem::path path_;
};

/// Environment variable naming the default output root.
inline constexpr const char* kOutEnv = "OFFRL_OUT";
/// --out if given, else $OFFRL_OUT, else ./offrl-out.
std::filesystem::path resolve_out_dir(const std::string& flag);

std::string file_sha256(const std::filesystem::path& path);

class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::filesystem::path out);
  ~Pipeline();

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& out() const { return out_; }

  void gen_corpus();
  void train_tf();
  void gen_offline();
  void train(const std::string& method);
  /// Methods may include "tf" for the stage-1 baseline.
  eval::Report eval_gen(const std::vector<std::string>& methods);
  eval::Report eval_rank(const std::vector<std::string>& methods);
  /// which: "threshold", "alpha" or "fraction".
  eval::Report ablate(const std::string& which);
  /// gen-corpus, train-tf, gen-offline, every configured method, eval-gen and
  /// eval-rank.
  void run_all();

  /// Hash of the config sections (and upstream stages) an artifact depends on.
  std::string stage_hash(const std::string& stage) const;
  unsigned long long stage_seed(const std::string& stage) const;

  // Artifact paths.
  std::filesystem::path corpus_path() const { return out_ / "corpus.jsonl"; }
  std::filesystem::path corpus_meta_path() const { return out_ / "corpus.meta.json"; }
  std::filesystem::path tf_path() const { return out_ / "tf.ckpt"; }
  std::filesystem::path ref_path() const { return out_ / "ref.ckpt"; }
  std::filesystem::path offline_path() const { return out_ / "offline.jsonl"; }
  std::filesystem::path offline_val_path() const { return out_ / "offline_val.jsonl"; }
  std::filesystem::path model_path(const std::string& method) const;
  std::filesystem::path reports_dir() const { return out_ / "reports"; }

  struct Data {
    corpus::Vocab vocab;
    std::vector<corpus::ContextResponsePair> train, val, test;
  };
  /// The stage-1 data, loaded from the corpus artifacts.
  const Data& data();

 private:
  struct Loaded;

  const rewards::RewardModel& reward();
  policy::PolicyModel load_model(const std::filesystem::path& path, const std::string& stage,
                                 const std::string& command);
  train::OfflineDataset load_offline(const std::filesystem::path& path);
  train::OfflineDataset stage3_data();
  nlohmann::json provenance(const std::string& stage, const std::vector<std::filesystem::path>& upstream) const;
  void check_provenance(const nlohmann::json& prov, const std::filesystem::path& file, const std::string& stage,
                        const std::string& command) const;
  void save_model(const policy::PolicyModel& model, const std::filesystem::path& path, const std::string& stage,
                  const std::vector<std::filesystem::path>& upstream);
  eval::SweepInputs sweep_inputs(const policy::PolicyModel& behavior, const train::OfflineDataset& train,
                                 const train::OfflineDataset& val);
  void write_manifest(const std::string& name, const std::vector<std::filesystem::path>& inputs);

  RunConfig cfg_;
  std::filesystem::path out_;
  std::unique_ptr<Data> data_;
  std::unique_ptr<rewards::RewardModel> reward_;
};

}  // namespace offrl::pipeline
