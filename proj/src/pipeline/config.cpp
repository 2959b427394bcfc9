#include "offrl/pipeline/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>

namespace offrl::pipeline {

using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string s = "invalid config:";
  for (const auto& p : problems) s += "\n  - " + p;
  return s;
}

// Section JSON without the seed: every stage seed derives from the root seed.
json without_seed(json j) {
  j.erase("seed");
  return j;
}

json top_filter_to_json(const train::TopFilterConfig& f) {
  json j = json::object();
  j["delta"] = f.delta ? json(*f.delta) : json(nullptr);
  j["quantile"] = f.quantile ? json(*f.quantile) : json(nullptr);
  j["human_only"] = f.human_only;
  return j;
}

train::TopFilterConfig top_filter_from_json(const json& j) {
  train::TopFilterConfig f;
  if (j.contains("delta") && !j["delta"].is_null()) f.delta = j["delta"].get<double>();
  if (j.contains("quantile") && !j["quantile"].is_null()) f.quantile = j["quantile"].get<double>();
  f.human_only = j.value("human_only", false);
  return f;
}

json decode_to_json(const policy::DecodeConfig& d) {
  return {{"mode", d.mode == policy::DecodeConfig::Mode::greedy ? "greedy" : "sample"},
          {"temperature", d.temperature},
          {"top_k", d.top_k},
          {"max_len", d.max_len}};
}

policy::DecodeConfig decode_from_json(const json& j, policy::DecodeConfig d) {
  const std::string mode = j.value("mode", std::string("sample"));
  if (mode == "greedy") {
    d.mode = policy::DecodeConfig::Mode::greedy;
  } else if (mode == "sample") {
    d.mode = policy::DecodeConfig::Mode::sample;
  } else {
    throw std::invalid_argument("unknown decode mode \"" + mode + "\"");
  }
  d.temperature = j.value("temperature", d.temperature);
  d.top_k = j.value("top_k", d.top_k);
  d.max_len = j.value("max_len", d.max_len);
  return d;
}

// Reports keys of `user` that the defaults do not have, and values whose JSON
// type differs from the default's.
void check_keys(const json& user, const json& base, const std::string& path, std::vector<std::string>& problems) {
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) {
      problems.push_back(where + ": unknown key");
      continue;
    }
    const json& b = base[key];
    if (b.is_null() || value.is_null()) continue;
    if (b.is_object()) {
      if (!value.is_object()) {
        problems.push_back(where + ": expected an object");
      } else {
        check_keys(value, b, where, problems);
      }
    } else if (b.is_number() != value.is_number() || b.is_boolean() != value.is_boolean() ||
               b.is_string() != value.is_string() || b.is_array() != value.is_array()) {
      problems.push_back(where + ": expected " + std::string(b.type_name()) + ", got " + value.type_name());
    } else if (b.is_number_unsigned() && value.is_number_integer() && value.get<long long>() < 0) {
      problems.push_back(where + ": must be nonnegative");
    }
  }
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

RunConfig RunConfig::defaults(const std::string& preset) {
  RunConfig c;
  c.preset = preset;

  c.model.dim = 64;
  c.model.layers = 2;
  c.model.heads = 2;
  c.model.block = 1024;

  c.tf.epochs = 10;
  c.tf.batch_size = 16;
  c.tf.lr = 1e-4;
  c.ref = c.tf;

  c.stage3.epochs = 5;
  c.stage3.batch_size = 32;
  c.stage3.lr = 5e-5;
  c.top_filter.delta = 0.5;

  c.ilql.batch_size = 16;
  c.ilql.lr = 1e-4;
  c.ilql.adam = {0.9, 0.95, 1e-8, 0.0};
  c.ilql.alpha = 0.05;
  c.ilql.tau = 0.7;
  c.ilql.gamma = 0.99;

  c.ppo.lr = 5e-7;
  c.ppo.adam = {0.9, 0.95, 1e-8, 1e-6};
  c.ppo.value_coef = 2.3;
  c.ppo.kl_coef = 0.2;

  if (preset == "paper") return c;
  if (preset != "desk") throw ConfigError({"preset: unknown preset \"" + preset + "\" (expected paper or desk)"});

  c.model.dim = 32;
  c.model.block = 64;
  c.tf.lr = 3e-3;
  c.ref = c.tf;
  c.stage3.batch_size = 16;
  c.stage3.lr = 1e-3;
  c.ilql.lr = 1e-3;
  c.ppo.lr = 1e-4;
  return c;
}

json RunConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["fraction"] = fraction;
  j["methods"] = methods;
  j["corpus_path"] = corpus_path ? json(corpus_path->string()) : json(nullptr);
  j["synthetic"] = without_seed(synthetic.to_json());
  j["max_context"] = max_context;
  j["num_bins"] = num_bins;
  j["reward"] = reward.to_json();
  json m = model.to_json();
  m.erase("vocab_size");
  j["model"] = m;
  j["tf"] = without_seed(tf.to_json());
  j["ref"] = without_seed(ref.to_json());
  j["offline"] = {{"n_model", offline.n_model}, {"decode", decode_to_json(offline.decode)}};
  j["stage3"] = without_seed(stage3.to_json());
  j["top_filter"] = top_filter_to_json(top_filter);
  j["ilql"] = without_seed(ilql.to_json());
  j["ppo"] = without_seed(ppo.to_json());
  j["quark"] = {{"epochs", quark.epochs},
                {"collect_per_epoch", quark.collect_per_epoch},
                {"decode", decode_to_json(quark.decode)}};
  j["eval"] = {{"topk_max", eval.topk_max},   {"candidates", eval.candidates},
               {"max_len", eval.max_len},     {"temperature", eval.temperature},
               {"critic", std::string(train::critic_score_name(eval.critic))},
               {"perplexity", eval.perplexity}};
  j["ablation"] = {{"quantiles", ablation.quantiles}, {"alphas", ablation.alphas}, {"fractions", ablation.fractions}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});
  std::string preset = "paper";
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError({"preset: expected string"});
    preset = j["preset"].get<std::string>();
  }
  RunConfig c = defaults(preset);
  const json base = c.to_json();
  std::vector<std::string> problems;
  check_keys(j, base, "", problems);

  // Unknown keys are dropped so the remaining fields can still be checked.
  json m = base;
  json known = j;
  for (auto it = known.begin(); it != known.end();) {
    it = base.contains(it.key()) ? std::next(it) : known.erase(it);
  }
  m.merge_patch(known);
  auto section = [&](const char* name, const std::function<void()>& parse) {
    try {
      parse();
    } catch (const std::exception& e) {
      problems.push_back(std::string(name) + ": " + e.what());
    }
  };
  section("seed", [&] { c.seed = m["seed"].get<unsigned long long>(); });
  section("fraction", [&] { c.fraction = m["fraction"].get<double>(); });
  section("methods", [&] { c.methods = m["methods"].get<std::vector<std::string>>(); });
  section("corpus_path", [&] {
    if (m.contains("corpus_path") && !m["corpus_path"].is_null()) {
      c.corpus_path = std::filesystem::path(m["corpus_path"].get<std::string>());
    }
  });
  section("synthetic", [&] { c.synthetic = corpus::SyntheticTaskSpec::from_json(m["synthetic"]); });
  section("max_context", [&] { c.max_context = m["max_context"].get<int>(); });
  section("num_bins", [&] { c.num_bins = m["num_bins"].get<int>(); });
  section("reward", [&] { c.reward = rewards::RewardSpec::from_json(m["reward"]); });
  section("model", [&] { c.model = policy::CausalLMConfig::from_json(m["model"]); });
  section("tf", [&] { c.tf = train::SupervisedConfig::from_json(m["tf"], c.tf); });
  section("ref", [&] { c.ref = train::SupervisedConfig::from_json(m["ref"], c.ref); });
  section("offline", [&] {
    c.offline.n_model = m["offline"]["n_model"].get<int>();
    c.offline.decode = decode_from_json(m["offline"]["decode"], c.offline.decode);
  });
  section("stage3", [&] { c.stage3 = train::SupervisedConfig::from_json(m["stage3"], c.stage3); });
  section("top_filter", [&] { c.top_filter = top_filter_from_json(m["top_filter"]); });
  section("ilql", [&] { c.ilql = train::ILQLConfig::from_json(m["ilql"], c.ilql); });
  section("ppo", [&] { c.ppo = train::PPOConfig::from_json(m["ppo"], c.ppo); });
  section("quark", [&] {
    c.quark.epochs = m["quark"]["epochs"].get<int>();
    c.quark.collect_per_epoch = m["quark"]["collect_per_epoch"].get<int>();
    c.quark.decode = decode_from_json(m["quark"]["decode"], c.quark.decode);
  });
  section("eval", [&] {
    const json& e = m["eval"];
    c.eval.topk_max = e["topk_max"].get<int>();
    c.eval.candidates = e["candidates"].get<int>();
    c.eval.max_len = e["max_len"].get<int>();
    c.eval.temperature = e["temperature"].get<double>();
    c.eval.critic = train::critic_score_from_name(e["critic"].get<std::string>());
    c.eval.perplexity = e["perplexity"].get<bool>();
  });
  section("ablation", [&] {
    c.ablation.quantiles = m["ablation"]["quantiles"].get<std::vector<double>>();
    c.ablation.alphas = m["ablation"]["alphas"].get<std::vector<double>>();
    c.ablation.fractions = m["ablation"]["fractions"].get<std::vector<double>>();
  });
  try {
    c.validate();
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return from_json(j);
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  auto check = [&](const char* name, const std::function<void()>& f) {
    try {
      f();
    } catch (const std::exception& e) {
      problems.push_back(std::string(name) + ": " + e.what());
    }
  };
  auto require = [&](bool ok, const std::string& message) {
    if (!ok) problems.push_back(message);
  };

  require(fraction > 0.0 && fraction <= 1.0, "fraction: must lie in (0, 1]");
  require(!methods.empty(), "methods: list is empty");
  for (const auto& m : methods) {
    require(std::find(kMethods.begin(), kMethods.end(), m) != kMethods.end(),
            "methods: unknown method \"" + m + "\"");
  }
  require(max_context >= 1, "max_context: must be at least 1");
  require(num_bins >= 1, "num_bins: must be at least 1");
  check("reward", [&] { reward.validate(); });
  check("model", [&] {
    policy::CausalLMConfig m = model;
    m.vocab_size = std::max(m.vocab_size, 4);
    m.validate();
  });
  const int longest = std::max({offline.decode.max_len, quark.decode.max_len, ppo.decode.max_len, eval.max_len});
  // Context (with SEP), an optional bin token and the response must fit the block.
  require(model.block >= max_context + 2 + longest,
          "model.block: " + std::to_string(model.block) + " cannot hold a context of " + std::to_string(max_context) +
              " tokens plus SEP, a bin token and a " + std::to_string(longest) + "-token response");
  check("tf", [&] { tf.validate(); });
  check("ref", [&] { ref.validate(); });
  require(offline.n_model >= 0, "offline.n_model: must be nonnegative");
  check("offline.decode", [&] { offline.decode.validate(); });
  check("stage3", [&] { stage3.validate(); });
  check("top_filter", [&] { top_filter.validate(); });
  check("ilql", [&] { ilql.validate(); });
  check("ppo", [&] { ppo.validate(); });
  require(quark.epochs >= 1, "quark.epochs: must be at least 1");
  require(quark.collect_per_epoch >= 0, "quark.collect_per_epoch: must be nonnegative");
  check("quark.decode", [&] { quark.decode.validate(); });
  require(eval.topk_max >= 1, "eval.topk_max: must be at least 1");
  require(eval.candidates >= 1, "eval.candidates: must be at least 1");
  require(eval.max_len >= 1, "eval.max_len: must be at least 1");
  require(eval.temperature > 0.0, "eval.temperature: must be positive");

  const auto& qs = ablation.quantiles;
  require(std::find(qs.begin(), qs.end(), 0.0) != qs.end() && std::find(qs.begin(), qs.end(), 1.0) != qs.end(),
          "ablation.quantiles: must include 0 and 1");
  for (double q : qs) require(q >= 0.0 && q <= 1.0, "ablation.quantiles: " + std::to_string(q) + " is outside [0, 1]");
  require(!ablation.alphas.empty(), "ablation.alphas: list is empty");
  for (double a : ablation.alphas) require(a >= 0.0, "ablation.alphas: values must be nonnegative");
  require(!ablation.fractions.empty(), "ablation.fractions: list is empty");
  for (double f : ablation.fractions) require(f > 0.0 && f <= 1.0, "ablation.fractions: values must lie in (0, 1]");
  if (!problems.empty()) throw ConfigError(problems);
}

}  // namespace offrl::pipeline
