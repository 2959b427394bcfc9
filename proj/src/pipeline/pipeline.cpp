#include "offrl/pipeline/pipeline.hpp"

#include "offrl/util/hash.hpp"

#include <algorithm>
#include <cerrno>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

namespace offrl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kAblations = {"threshold", "alpha", "fraction"};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& body) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << body;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Writes through a temporary file so an interrupted stage never leaves a
// truncated artifact under the final name.
template <class Writer>
void atomic_write(const fs::path& path, Writer&& write) {
  const fs::path tmp = path.string() + ".tmp";
  write(tmp);
  fs::rename(tmp, path);
}

bool conditioned(const std::string& method) { return method == "dt" || method == "quark"; }

void require_method(const std::string& method, bool allow_tf) {
  if (allow_tf && method == "tf") return;
  if (std::find(kMethods.begin(), kMethods.end(), method) == kMethods.end()) {
    throw ConfigError({"unknown method \"" + method + "\""});
  }
}

}  // namespace

// ---------------------------------------------------------------- lock

RunLock::RunLock(const fs::path& dir) : path_(path_for(dir)) {
  fs::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
      ::close(fd);
      if (!ok) throw std::runtime_error("cannot write lock file " + path_.string());
      return;
    }
    if (errno != EEXIST) throw std::runtime_error("cannot create lock file " + path_.string());
    long holder = 0;
    std::ifstream(path_) >> holder;
    if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM)) {
      throw RunLocked("output directory " + dir.string() + " is in use by process " + std::to_string(holder) +
                      " (lock file " + path_.string() + ")");
    }
    std::error_code ec;
    fs::remove(path_, ec);
  }
  throw RunLocked("could not acquire lock file " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

fs::path RunLock::path_for(const fs::path& dir) { return dir / ".offrl.lock"; }

fs::path resolve_out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutEnv); env != nullptr && *env != '\0') return env;
  return "offrl-out";
}

std::string file_sha256(const fs::path& path) { return util::sha256_hex(read_file(path)); }

// ---------------------------------------------------------------- pipeline

Pipeline::Pipeline(RunConfig cfg, fs::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {
  cfg_.validate();
}

Pipeline::~Pipeline() = default;

fs::path Pipeline::model_path(const std::string& method) const {
  if (method == "tf") return tf_path();
  return out_ / "models" / (method + ".ckpt");
}

unsigned long long Pipeline::stage_seed(const std::string& stage) const { return util::derive_seed(cfg_.seed, stage); }

std::string Pipeline::stage_hash(const std::string& stage) const {
  const json c = cfg_.to_json();
  json j;
  j["stage"] = stage;
  j["seed"] = cfg_.seed;
  if (stage == "corpus") {
    j["synthetic"] = c["synthetic"];
    j["max_context"] = c["max_context"];
    j["num_bins"] = c["num_bins"];
    if (cfg_.corpus_path) j["corpus_file"] = file_sha256(*cfg_.corpus_path);
  } else if (stage == "tf" || stage == "ref") {
    j["upstream"] = stage_hash("corpus");
    j["model"] = c["model"];
    j["train"] = c[stage];
  } else if (stage == "offline") {
    j["upstream"] = stage_hash("tf");
    j["reward"] = c["reward"];
    j["offline"] = c["offline"];
  } else if (std::find(kMethods.begin(), kMethods.end(), stage) != kMethods.end()) {
    j["upstream"] = stage_hash("offline");
    j["fraction"] = cfg_.fraction;
    if (stage == "ilql") {
      j["ilql"] = c["ilql"];
    } else if (stage == "ppo") {
      j["ppo"] = c["ppo"];
    } else {
      j["stage3"] = c["stage3"];
      if (stage == "tf-top") j["top_filter"] = c["top_filter"];
      if (stage == "quark") j["quark"] = c["quark"];
    }
  } else {
    throw std::logic_error("no stage named " + stage);
  }
  return util::short_hash(j.dump());
}

json Pipeline::provenance(const std::string& stage, const std::vector<fs::path>& upstream) const {
  json up = json::object();
  for (const auto& p : upstream) up[p.filename().string()] = file_sha256(p);
  return {{"stage", stage}, {"config_hash", stage_hash(stage)}, {"seed", cfg_.seed}, {"upstream", up}};
}

void Pipeline::check_provenance(const json& prov, const fs::path& file, const std::string& stage,
                                const std::string& command) const {
  if (!prov.is_object() || prov.value("config_hash", std::string()) != stage_hash(stage)) {
    throw MissingArtifact(file.string() + " was built with a different config; run " + command + " again", command);
  }
  const json upstream = prov.value("upstream", json::object());
  for (const auto& [name, hash] : upstream.items()) {
    const fs::path up = out_ / name;
    if (!fs::exists(up) || file_sha256(up) != hash.get<std::string>()) {
      throw MissingArtifact(name + " changed after " + file.filename().string() + " was built; run " + command +
                                " again",
                            command);
    }
  }
}

const Pipeline::Data& Pipeline::data() {
  if (data_) return *data_;
  if (!fs::exists(corpus_meta_path()) || !fs::exists(corpus_path())) {
    throw MissingArtifact("no corpus in " + out_.string() + "; run gen-corpus first", "gen-corpus");
  }
  const json meta = json::parse(read_file(corpus_meta_path()));
  check_provenance(meta.at("provenance"), corpus_meta_path(), "corpus", "gen-corpus");
  auto d = std::make_unique<Data>();
  d->vocab = corpus::Vocab::from_json(meta.at("vocab"));
  const auto convs = corpus::load_jsonl(corpus_path());
  const auto splits = corpus::split_by_conversation(convs, meta.at("split_seed").get<unsigned long long>());
  d->train = corpus::pairs_from_conversations(splits.train, d->vocab, cfg_.max_context);
  d->val = corpus::pairs_from_conversations(splits.val, d->vocab, cfg_.max_context);
  d->test = corpus::pairs_from_conversations(splits.test, d->vocab, cfg_.max_context);
  data_ = std::move(d);
  return *data_;
}

const rewards::RewardModel& Pipeline::reward() {
  if (!reward_) reward_ = std::make_unique<rewards::RewardModel>(cfg_.reward, data().vocab);
  return *reward_;
}

policy::PolicyModel Pipeline::load_model(const fs::path& path, const std::string& stage, const std::string& command) {
  if (!fs::exists(path)) {
    throw MissingArtifact("missing " + path.string() + "; run " + command + " first", command);
  }
  policy::CheckpointMeta meta;
  policy::PolicyModel m = policy::load_checkpoint(path, &meta);
  check_provenance(meta.provenance, path, stage, command);
  if (meta.vocab_hash != data().vocab.hash()) {
    throw MissingArtifact(path.string() + " uses a different vocabulary; run " + command + " again", command);
  }
  return m;
}

void Pipeline::save_model(const policy::PolicyModel& model, const fs::path& path, const std::string& stage,
                          const std::vector<fs::path>& upstream) {
  fs::create_directories(path.parent_path());
  policy::CheckpointMeta meta{data().vocab.hash(), provenance(stage, upstream)};
  atomic_write(path, [&](const fs::path& tmp) { policy::save_checkpoint(tmp, model, meta); });
}

train::OfflineDataset Pipeline::load_offline(const fs::path& path) {
  if (!fs::exists(path)) {
    throw MissingArtifact("missing " + path.string() + "; run gen-offline first", "gen-offline");
  }
  train::OfflineDataset d = train::OfflineDataset::load(path);
  check_provenance(d.provenance.value("pipeline", json()), path, "offline", "gen-offline");
  return d;
}

train::OfflineDataset Pipeline::stage3_data() {
  train::OfflineDataset d = load_offline(offline_path());
  if (cfg_.fraction < 1.0) d = train::subsample_contexts(d, cfg_.fraction, stage_seed("fraction"));
  return d;
}

void Pipeline::write_manifest(const std::string& name, const std::vector<fs::path>& inputs) {
  json up = json::object();
  for (const auto& p : inputs) {
    const std::string rel = fs::relative(p, out_).generic_string();
    up[rel] = file_sha256(p);
  }
  const json m = {{"format", "offrl-report"}, {"report", name}, {"seed", cfg_.seed}, {"inputs", up}};
  fs::create_directories(reports_dir());
  write_text(reports_dir() / (name + ".provenance.json"), m.dump(2) + "\n");
}

// ---------------------------------------------------------------- stages

void Pipeline::gen_corpus() {
  fs::create_directories(out_);
  std::vector<corpus::Conversation> convs;
  if (cfg_.corpus_path) {
    convs = corpus::load_jsonl(*cfg_.corpus_path);
  } else {
    corpus::SyntheticTaskSpec spec = cfg_.synthetic;
    spec.seed = stage_seed("corpus");
    convs = corpus::generate_synthetic_corpus(spec);
  }
  if (convs.empty()) throw std::runtime_error("the corpus has no conversations");
  atomic_write(corpus_path(), [&](const fs::path& tmp) { corpus::save_jsonl(tmp, convs); });

  const corpus::Vocab vocab = corpus::Vocab::build(convs, cfg_.num_bins);
  const unsigned long long split_seed = stage_seed("split");
  const auto splits = corpus::split_by_conversation(convs, split_seed);
  if (splits.train.empty() || splits.val.empty() || splits.test.empty()) {
    throw std::runtime_error("the corpus is too small for a train/val/test split (" + std::to_string(convs.size()) +
                             " conversations)");
  }
  const json meta = {{"format", "offrl-corpus"},
                     {"version", 1},
                     {"provenance", provenance("corpus", {corpus_path()})},
                     {"split_seed", split_seed},
                     {"conversations", {{"train", splits.train.size()}, {"val", splits.val.size()}, {"test", splits.test.size()}}},
                     {"vocab", vocab.to_json()}};
  write_text(corpus_meta_path(), meta.dump() + "\n");
  data_.reset();
  reward_.reset();
}

void Pipeline::train_tf() {
  const Data& d = data();
  policy::CausalLMConfig mc = cfg_.model;
  mc.vocab_size = d.vocab.size();

  policy::PolicyModel beta(mc, stage_seed("tf-init"));
  train::SupervisedConfig tc = cfg_.tf;
  tc.seed = stage_seed("tf");
  const train::TrainLog log = train::train_tf(beta, d.train, d.val, tc);
  save_model(beta, tf_path(), "tf", {corpus_meta_path()});

  if (cfg_.eval.perplexity) {
    policy::PolicyModel ref(mc, stage_seed("ref-init"));
    train::SupervisedConfig rc = cfg_.ref;
    rc.seed = stage_seed("ref");
    train::train_tf(ref, d.train, d.val, rc);
    save_model(ref, ref_path(), "ref", {corpus_meta_path()});
  }
  const json l = {{"epoch_loss", log.epoch_loss}, {"val_loss", log.val_loss}, {"best_epoch", log.best_epoch}};
  write_text(out_ / "tf.log.json", l.dump(2) + "\n");
}

void Pipeline::gen_offline() {
  const Data& d = data();
  const policy::PolicyModel beta = load_model(tf_path(), "tf", "train-tf");
  train::OfflineGenConfig gc = cfg_.offline;
  gc.seed = stage_seed("offline");
  train::OfflineDataset train = train::generate_offline_dataset(beta, d.train, reward(), d.vocab, gc);
  gc.seed = stage_seed("offline-val");
  train::OfflineDataset val = train::generate_offline_dataset(beta, d.val, reward(), d.vocab, gc);
  const json prov = provenance("offline", {corpus_meta_path(), tf_path()});
  train.provenance["pipeline"] = prov;
  val.provenance["pipeline"] = prov;
  atomic_write(offline_path(), [&](const fs::path& tmp) { train.save(tmp); });
  atomic_write(offline_val_path(), [&](const fs::path& tmp) { val.save(tmp); });
}

void Pipeline::train(const std::string& method) {
  require_method(method, false);
  const Data& d = data();
  const policy::PolicyModel beta = load_model(tf_path(), "tf", "train-tf");
  train::OfflineDataset data = stage3_data();
  const train::OfflineDataset val = load_offline(offline_val_path());
  const train::BinQuantizer q(cfg_.num_bins);

  policy::PolicyModel m = beta;
  m.role = policy::Role::learned;
  train::SupervisedConfig sc = cfg_.stage3;
  sc.seed = stage_seed("train:" + method);
  json log;
  auto supervised_log = [](const train::TrainLog& l) {
    return json{{"epoch_loss", l.epoch_loss}, {"val_loss", l.val_loss}, {"best_epoch", l.best_epoch}};
  };

  if (method == "tf-all") {
    log = supervised_log(train::train_tf_all(m, data, val, sc));
  } else if (method == "tf-top") {
    log = supervised_log(train::train_tf_top(m, data, val, cfg_.top_filter, sc));
    log["records"] = train::filter_top(data, cfg_.top_filter).size();
  } else if (method == "dt") {
    log = supervised_log(train::train_dt(m, data, val, q, d.vocab, sc));
  } else if (method == "ilql") {
    train::ILQLConfig ic = cfg_.ilql;
    ic.seed = stage_seed("train:ilql");
    const train::ILQLLog l = train::train_ilql(m, train::ilql_sequences(data), ic);
    log = {{"steps", l.step_loss.size()},
           {"final_td", l.td.empty() ? 0.0 : l.td.back()},
           {"final_expectile", l.expectile.empty() ? 0.0 : l.expectile.back()}};
  } else if (method == "ppo") {
    train::PPOConfig pc = cfg_.ppo;
    pc.seed = stage_seed("train:ppo");
    const auto stats = train::train_ppo(m, beta, d.train, reward(), d.vocab, pc);
    json rows = json::array();
    for (const auto& s : stats) {
      rows.push_back({{"mean_reward", s.mean_reward}, {"kl", s.kl}, {"kl_coef", s.kl_coef}});
    }
    log = {{"iterations", rows}};
  } else if (method == "quark") {
    train::QuarkConfig qc = cfg_.quark;
    qc.seed = stage_seed("train:quark");
    const train::QuarkLog l = train::quark_loop(m, data, val, d.train, reward(), q, d.vocab, sc, qc);
    log = supervised_log(l.train);
    log["dataset_sizes"] = l.dataset_sizes;
    log["collected_reward"] = l.collected_reward;
  }
  save_model(m, model_path(method), method, {corpus_meta_path(), tf_path(), offline_path(), offline_val_path()});
  write_text(out_ / "models" / (method + ".log.json"), log.dump(2) + "\n");
}

eval::Report Pipeline::eval_gen(const std::vector<std::string>& methods) {
  if (methods.empty()) throw ConfigError({"no methods to evaluate"});
  for (const auto& m : methods) require_method(m, true);
  const Data& d = data();
  std::optional<policy::PolicyModel> ref;
  std::vector<fs::path> inputs = {corpus_meta_path()};
  if (cfg_.eval.perplexity) {
    ref = load_model(ref_path(), "ref", "train-tf");
    inputs.push_back(ref_path());
  }
  eval::Report report;
  for (const auto& method : methods) {
    const policy::PolicyModel m =
        load_model(model_path(method), method == "tf" ? "tf" : method, method == "tf" ? "train-tf" : "train " + method);
    inputs.push_back(model_path(method));
    eval::GenerationOptions o;
    if (conditioned(method)) o.condition_token = d.vocab.bin(cfg_.num_bins - 1);
    o.implicit = method == "ilql";
    o.max_len = cfg_.eval.max_len;
    o.topk_max = cfg_.eval.topk_max;
    o.temperature = cfg_.eval.temperature;
    o.seed = stage_seed("eval-gen");
    o.reference = ref ? &*ref : nullptr;
    eval::GenerationReport g = eval::eval_generation(m, d.test, reward(), d.vocab, o);
    g.method = method;
    g.seed = cfg_.seed;
    g.fraction = method == "tf" ? 1.0 : cfg_.fraction;
    report.generation.push_back(std::move(g));
  }
  eval::emit_report(report, reports_dir());
  write_manifest("generation", inputs);
  return report;
}

eval::Report Pipeline::eval_rank(const std::vector<std::string>& methods) {
  if (methods.empty()) throw ConfigError({"no methods to evaluate"});
  for (const auto& m : methods) require_method(m, true);
  const Data& d = data();
  const policy::PolicyModel beta = load_model(tf_path(), "tf", "train-tf");
  const eval::CandidateSet set = eval::make_candidates(beta, d.test, reward(), d.vocab, cfg_.eval.candidates,
                                                       cfg_.eval.max_len, stage_seed("candidates"));
  std::vector<fs::path> inputs = {corpus_meta_path(), tf_path()};
  eval::Report report;
  auto add = [&](const std::string& name, const eval::CandidateScorer& s) {
    eval::RankReport r = eval::eval_ranker(name, set, d.test, s);
    r.seed = cfg_.seed;
    report.ranker.push_back(std::move(r));
  };
  for (const auto& method : methods) {
    const policy::PolicyModel m =
        method == "tf" ? beta : load_model(model_path(method), method, "train " + method);
    if (method != "tf") inputs.push_back(model_path(method));
    if (method == "ilql") {
      add(method, eval::critic_scorer(m, cfg_.eval.critic));
    } else if (conditioned(method)) {
      add(method, eval::log_prob_scorer(m, d.vocab.bin(cfg_.num_bins - 1)));
    } else {
      add(method, eval::log_prob_scorer(m));
    }
  }
  add("oracle", eval::oracle_scorer(set));
  add("random", eval::random_scorer(stage_seed("random-ranker")));
  eval::emit_report(report, reports_dir());
  write_manifest("ranker", inputs);
  return report;
}

eval::SweepInputs Pipeline::sweep_inputs(const policy::PolicyModel& behavior, const train::OfflineDataset& train,
                                         const train::OfflineDataset& val) {
  const Data& d = data();
  eval::SweepInputs in;
  in.behavior = &behavior;
  in.train = &train;
  in.val = &val;
  in.test = &d.test;
  in.reward = &reward();
  in.vocab = &d.vocab;
  in.max_len = cfg_.eval.max_len;
  return in;
}

eval::Report Pipeline::ablate(const std::string& which) {
  if (std::find(kAblations.begin(), kAblations.end(), which) == kAblations.end()) {
    throw ConfigError({"unknown ablation \"" + which + "\" (expected threshold, alpha or fraction)"});
  }
  const policy::PolicyModel beta = load_model(tf_path(), "tf", "train-tf");
  const train::OfflineDataset train = load_offline(offline_path());
  const train::OfflineDataset val = load_offline(offline_val_path());
  const eval::SweepInputs in = sweep_inputs(beta, train, val);
  train::SupervisedConfig sc = cfg_.stage3;
  sc.seed = stage_seed("ablate:" + which);

  eval::Report report;
  if (which == "threshold") {
    report.ablations[which] = eval::ablate_threshold(in, cfg_.ablation.quantiles, sc);
  } else if (which == "alpha") {
    train::ILQLConfig ic = cfg_.ilql;
    ic.seed = stage_seed("ablate:alpha");
    report.ablations[which] = eval::ablate_alpha(in, cfg_.ablation.alphas, ic);
  } else {
    report.ablations[which] = eval::data_fraction_sweep(in, cfg_.ablation.fractions, sc,
                                                        train::BinQuantizer(cfg_.num_bins), cfg_.top_filter,
                                                        stage_seed("fraction"));
  }
  eval::emit_report(report, reports_dir());
  write_manifest("ablation_" + which, {corpus_meta_path(), tf_path(), offline_path(), offline_val_path()});
  return report;
}

void Pipeline::run_all() {
  gen_corpus();
  train_tf();
  gen_offline();
  for (const auto& m : cfg_.methods) train(m);
  std::vector<std::string> methods = {"tf"};
  methods.insert(methods.end(), cfg_.methods.begin(), cfg_.methods.end());
  eval_gen(methods);
  eval_rank(methods);
}

}  // namespace offrl::pipeline
