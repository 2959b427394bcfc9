#include "offrl/corpus/corpus.hpp"

#include "offrl/util/hash.hpp"

#include <algorithm>
#include <cstdio>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace offrl::corpus {

std::string_view speaker_name(Speaker s) { return s == Speaker::user ? "user" : "system"; }

std::string_view speaker_tag(Speaker s) { return s == Speaker::user ? "[CUS]" : "[REP]"; }

Words split_words(std::string_view text) {
  Words out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------- Vocab

void Vocab::add(const std::string& token) {
  if (ids_.count(token)) return;
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<Conversation>& corpus, int num_bins) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus");
  if (num_bins < 2) throw std::invalid_argument("bin count K must be at least 2");
  Vocab v;
  v.num_bins_ = num_bins;
  v.add(std::string(kPad));
  v.add(std::string(kEos));
  v.add(std::string(kSep));
  for (int k = 0; k < num_bins; ++k) v.add("<r" + std::to_string(k) + ">");
  v.add(std::string(speaker_tag(Speaker::user)));
  v.add(std::string(speaker_tag(Speaker::system)));
  for (const auto& c : corpus) {
    for (const auto& t : c.turns) {
      for (const auto& w : t.text) {
        if (w.size() > 1 && w.front() == '<' && w.back() == '>') {
          // Reserved shape for special tokens; keeps specials out of surface text.
          if (v.ids_.count(w) && v.is_special(v.ids_.at(w))) {
            throw std::invalid_argument("surface token collides with special token: " + w);
          }
        }
        v.add(w);
      }
      for (const auto& p : t.paraphrases) {
        for (const auto& w : p) v.add(w);
      }
    }
  }
  return v;
}

int Vocab::bin(int k) const {
  if (k < 0 || k >= num_bins_) throw std::out_of_range("bin index " + std::to_string(k) + " out of range");
  return 3 + k;
}

std::optional<int> Vocab::bin_index(int id) const {
  if (id >= 3 && id < 3 + num_bins_) return id - 3;
  return std::nullopt;
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocab::id(std::string_view token) const {
  auto f = find(token);
  if (!f) throw std::out_of_range("token not in vocabulary: " + std::string(token));
  return *f;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

TokenIds Vocab::encode(std::span<const std::string> words) const {
  TokenIds out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

TokenIds Vocab::encode(std::string_view text) const {
  const Words w = split_words(text);
  return encode(std::span<const std::string>(w));
}

Words Vocab::decode_words(std::span<const int> ids) const {
  Words out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  const Words w = decode_words(ids);
  return join_words(w);
}

std::string Vocab::hash() const {
  std::string joined = std::to_string(num_bins_);
  for (const auto& t : tokens_) {
    joined.push_back('\n');
    joined += t;
  }
  return util::short_hash(joined);
}

nlohmann::json Vocab::to_json() const {
  return {{"num_bins", num_bins_}, {"tokens", tokens_}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  v.num_bins_ = j.at("num_bins").get<int>();
  for (const auto& t : j.at("tokens")) v.add(t.get<std::string>());
  if (v.size() < 3 + v.num_bins_ || v.token(0) != kPad || v.token(1) != kEos || v.token(2) != kSep) {
    throw std::runtime_error("vocabulary file has an invalid special-token layout");
  }
  return v;
}

// ---------------------------------------------------------------- pairs

std::vector<ContextResponsePair> pairs_from_conversations(const std::vector<Conversation>& corpus,
                                                          const Vocab& vocab, int max_context_len) {
  if (max_context_len < 1) throw std::invalid_argument("max_context_len must be at least 1");
  std::vector<ContextResponsePair> out;
  for (const auto& conv : corpus) {
    TokenIds history;
    for (std::size_t ti = 0; ti < conv.turns.size(); ++ti) {
      const Turn& turn = conv.turns[ti];
      if (turn.speaker == Speaker::system) {
        ContextResponsePair pair;
        TokenIds ctx = history;
        ctx.push_back(vocab.id(speaker_tag(Speaker::system)));
        const auto keep = std::min<std::size_t>(ctx.size(), static_cast<std::size_t>(max_context_len));
        pair.context.assign(ctx.end() - static_cast<std::ptrdiff_t>(keep), ctx.end());
        pair.context.push_back(vocab.sep());
        pair.response = vocab.encode(std::span<const std::string>(turn.text));
        pair.response.push_back(vocab.eos());
        if (turn.paraphrase_class) {
          ParaphraseClass pc;
          pc.id = *turn.paraphrase_class;
          for (const auto& p : turn.paraphrases) pc.members.push_back(vocab.encode(std::span<const std::string>(p)));
          pair.paraphrase = std::move(pc);
        }
        pair.conversation_id = conv.id;
        pair.turn_index = static_cast<int>(ti);
        out.push_back(std::move(pair));
      }
      history.push_back(vocab.id(speaker_tag(turn.speaker)));
      const TokenIds words = vocab.encode(std::span<const std::string>(turn.text));
      history.insert(history.end(), words.begin(), words.end());
    }
  }
  return out;
}

TokenIds surface(std::span<const int> ids, const Vocab& vocab) {
  TokenIds out;
  for (int id : ids) {
    if (!vocab.is_special(id)) out.push_back(id);
  }
  return out;
}

Splits split_by_conversation(const std::vector<Conversation>& corpus, unsigned long long seed) {
  Splits s;
  for (const auto& c : corpus) {
    const auto bucket = util::stable_u64(std::to_string(seed) + ":" + c.id) % 100;
    if (bucket < 80) {
      s.train.push_back(c);
    } else if (bucket < 90) {
      s.val.push_back(c);
    } else {
      s.test.push_back(c);
    }
  }
  return s;
}

// ---------------------------------------------------------------- JSONL

Conversation conversation_from_json(const nlohmann::json& j) {
  Conversation c;
  c.id = j.at("id").get<std::string>();
  for (const auto& t : j.at("turns")) {
    Turn turn;
    const auto speaker = t.at("speaker").get<std::string>();
    if (speaker == "user") {
      turn.speaker = Speaker::user;
    } else if (speaker == "system") {
      turn.speaker = Speaker::system;
    } else {
      throw std::invalid_argument("unknown speaker \"" + speaker + "\"");
    }
    turn.text = split_words(t.at("text").get<std::string>());
    if (t.contains("class")) turn.paraphrase_class = t.at("class").get<std::string>();
    if (t.contains("paraphrases")) {
      for (const auto& p : t.at("paraphrases")) turn.paraphrases.push_back(split_words(p.get<std::string>()));
    }
    c.turns.push_back(std::move(turn));
  }
  return c;
}

nlohmann::json conversation_to_json(const Conversation& c) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : c.turns) {
    nlohmann::json jt;
    jt["speaker"] = speaker_name(t.speaker);
    jt["text"] = join_words(t.text);
    if (t.paraphrase_class) {
      jt["class"] = *t.paraphrase_class;
      nlohmann::json ps = nlohmann::json::array();
      for (const auto& p : t.paraphrases) ps.push_back(join_words(p));
      jt["paraphrases"] = std::move(ps);
    }
    turns.push_back(std::move(jt));
  }
  return {{"id", c.id}, {"turns", std::move(turns)}};
}

std::vector<Conversation> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Conversation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (split_words(line).empty()) continue;
    try {
      out.push_back(conversation_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_jsonl(const std::filesystem::path& path, const std::vector<Conversation>& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& c : corpus) out << conversation_to_json(c).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ---------------------------------------------------------------- synthetic

namespace {

const std::vector<std::string> kIntents = {"flight",  "hotel",   "order",        "refund",
                                           "password", "table",   "ticket",       "account",
                                           "payment",  "delivery", "subscription", "appointment"};

const std::vector<std::vector<std::string>> kValuePools = {
    {"boston", "denver", "austin", "chicago", "miami", "seattle", "portland", "dallas"},
    {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "weekend"},
    {"red", "blue", "green", "black", "white", "silver", "gold", "pink"},
    {"small", "medium", "large", "xl", "tiny", "huge", "mini", "jumbo"},
    {"morning", "noon", "evening", "night", "dawn", "dusk", "midnight", "afternoon"},
    {"two", "three", "four", "five", "six", "seven", "eight", "nine"},
};

// {I} intent, {A} first slot value, {B} second slot value (dropped for
// single-slot intents). Realizations of one act start with distinct tokens.
const std::vector<std::string> kAckTemplates = {
    "sure i can move your {I} to {A} {B}",  "okay changing the {I} to {A} {B} now",
    "no problem your {I} is now {A} {B}",   "alright i updated your {I} to {A} {B}",
    "got it {I} set to {A} {B}",
};
const std::vector<std::string> kCloseTemplates = {
    "your {I} is all set",
    "all done with the {I} for {A}",
    "everything for your {I} is complete",
    "that {I} request is finished",
    "we are done with your {I}",
};
const std::vector<std::string> kHoldTemplates = {
    "one moment please", "please hold on", "let me check that", "just a second", "bear with me",
};
const std::vector<std::string> kUserOpen = {
    "hi i need to change my {I} to {A} {B}",
    "hello please update my {I} to {A} {B}",
    "can you set my {I} to {A} {B}",
};
const std::vector<std::string> kUserFollow = {"thanks", "great thank you", "is that all", "ok what next"};

Words render(const std::string& tmpl, const std::string& intent, const std::string& a, const std::string& b) {
  Words out;
  for (const auto& w : split_words(tmpl)) {
    if (w == "{I}") {
      out.push_back(intent);
    } else if (w == "{A}") {
      out.push_back(a);
    } else if (w == "{B}") {
      if (!b.empty()) out.push_back(b);
    } else {
      out.push_back(w);
    }
  }
  return out;
}

std::vector<Words> render_all(const std::vector<std::string>& bank, int p, const std::string& intent,
                              const std::string& a, const std::string& b) {
  std::vector<Words> out;
  for (int k = 0; k < p; ++k) out.push_back(render(bank[static_cast<std::size_t>(k)], intent, a, b));
  return out;
}

}  // namespace

nlohmann::json SyntheticTaskSpec::to_json() const {
  return {{"num_intents", num_intents},
          {"slots_per_intent", slots_per_intent},
          {"values_per_slot", values_per_slot},
          {"paraphrases", paraphrases},
          {"num_conversations", num_conversations},
          {"system_turns", system_turns},
          {"holding_rate", holding_rate},
          {"holding_dominance", holding_dominance},
          {"seed", seed}};
}

SyntheticTaskSpec SyntheticTaskSpec::from_json(const nlohmann::json& j) {
  SyntheticTaskSpec s;
  s.num_intents = j.value("num_intents", s.num_intents);
  s.slots_per_intent = j.value("slots_per_intent", s.slots_per_intent);
  s.values_per_slot = j.value("values_per_slot", s.values_per_slot);
  s.paraphrases = j.value("paraphrases", s.paraphrases);
  s.num_conversations = j.value("num_conversations", s.num_conversations);
  s.system_turns = j.value("system_turns", s.system_turns);
  s.holding_rate = j.value("holding_rate", s.holding_rate);
  s.holding_dominance = j.value("holding_dominance", s.holding_dominance);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::vector<Conversation> generate_synthetic_corpus(const SyntheticTaskSpec& spec) {
  if (spec.paraphrases < 2) throw std::invalid_argument("paraphrases per system act must be at least 2");
  if (spec.paraphrases > static_cast<int>(kHoldTemplates.size())) {
    throw std::invalid_argument("at most " + std::to_string(kHoldTemplates.size()) +
                                " paraphrases per act are available");
  }
  if (spec.num_intents < 1 || spec.num_intents > static_cast<int>(kIntents.size())) {
    throw std::invalid_argument("num_intents must lie in [1, " + std::to_string(kIntents.size()) + "]");
  }
  if (spec.slots_per_intent.empty()) throw std::invalid_argument("slots_per_intent is empty");
  for (int s : spec.slots_per_intent) {
    if (s < 1 || s > 2) throw std::invalid_argument("slot counts must be 1 or 2");
  }
  if (spec.values_per_slot < 1 || spec.values_per_slot > static_cast<int>(kValuePools.front().size())) {
    throw std::invalid_argument("values_per_slot must lie in [1, 8]");
  }
  if (spec.system_turns < 1 || spec.system_turns > 2) throw std::invalid_argument("system_turns must be 1 or 2");
  if (spec.num_conversations < 0) throw std::invalid_argument("num_conversations must be nonnegative");
  if (!(spec.holding_rate >= 0.0 && spec.holding_rate <= 1.0) ||
      !(spec.holding_dominance >= 0.0 && spec.holding_dominance <= 1.0)) {
    throw std::invalid_argument("holding_rate and holding_dominance must lie in [0, 1]");
  }

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); };
  const int p = spec.paraphrases;

  auto holding_turn = [&]() {
    Turn t;
    t.speaker = Speaker::system;
    int k = 0;
    if (unit(rng) >= spec.holding_dominance) k = 1 + pick(p - 1);
    t.paraphrases = render_all(kHoldTemplates, p, "", "", "");
    t.text = t.paraphrases[static_cast<std::size_t>(k)];
    t.paraphrase_class = "hold";
    return t;
  };

  std::vector<Conversation> out;
  out.reserve(static_cast<std::size_t>(spec.num_conversations));
  for (int n = 0; n < spec.num_conversations; ++n) {
    const int intent_idx = pick(spec.num_intents);
    const std::string& intent = kIntents[static_cast<std::size_t>(intent_idx)];
    const int slots = spec.slots_per_intent[static_cast<std::size_t>(intent_idx) % spec.slots_per_intent.size()];
    const auto& pool_a = kValuePools[static_cast<std::size_t>(2 * intent_idx) % kValuePools.size()];
    const auto& pool_b = kValuePools[static_cast<std::size_t>(2 * intent_idx + 1) % kValuePools.size()];
    const std::string a = pool_a[static_cast<std::size_t>(pick(spec.values_per_slot))];
    const std::string b = slots == 2 ? pool_b[static_cast<std::size_t>(pick(spec.values_per_slot))] : "";

    Conversation c;
    char serial[16];
    std::snprintf(serial, sizeof serial, "%05d", n);
    c.id = "syn-" + std::to_string(spec.seed) + "-" + serial;

    Turn open;
    open.speaker = Speaker::user;
    open.text = render(kUserOpen[static_cast<std::size_t>(pick(static_cast<int>(kUserOpen.size())))], intent, a, b);
    c.turns.push_back(open);

    for (int st = 0; st < spec.system_turns; ++st) {
      if (st > 0) {
        Turn follow;
        follow.speaker = Speaker::user;
        follow.text = split_words(kUserFollow[static_cast<std::size_t>(pick(static_cast<int>(kUserFollow.size())))]);
        c.turns.push_back(follow);
      }
      if (unit(rng) < spec.holding_rate) {
        c.turns.push_back(holding_turn());
        continue;
      }
      Turn t;
      t.speaker = Speaker::system;
      if (st == 0) {
        t.paraphrases = render_all(kAckTemplates, p, intent, a, b);
        t.paraphrase_class = "ack:" + intent + ":" + a + (b.empty() ? "" : ":" + b);
      } else {
        t.paraphrases = render_all(kCloseTemplates, p, intent, a, "");
        t.paraphrase_class = "close:" + intent + ":" + a;
      }
      t.text = t.paraphrases[static_cast<std::size_t>(pick(p))];
      c.turns.push_back(std::move(t));
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace offrl::corpus
