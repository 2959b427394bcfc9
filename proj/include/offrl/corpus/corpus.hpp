#pragma once

// Conversations, vocabulary, context/response pairs and the JSON Lines
// corpus format.

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace offrl::corpus {

using TokenIds = std::vector<int>;
using Words = std::vector<std::string>;

enum class Speaker { user, system };

std::string_view speaker_name(Speaker s);
/// Vocabulary token that tags a turn by its speaker ("[CUS]" / "[REP]").
std::string_view speaker_tag(Speaker s);

struct Turn {
  Speaker speaker = Speaker::user;
  Words text;
  // Synthetic corpora only: the act this system turn realizes and every
  // surface realization of that act.
  std::optional<std::string> paraphrase_class;
  std::vector<Words> paraphrases;

  bool operator==(const Turn&) const = default;
};

struct Conversation {
  std::string id;
  std::vector<Turn> turns;

  bool operator==(const Conversation&) const = default;
};

Words split_words(std::string_view text);
std::string join_words(std::span<const std::string> words);

class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kSep = "<sep>";

  Vocab() = default;

  /// Specials first (PAD, EOS, SEP, R_0..R_{K-1}), then the speaker tags, then
  /// every surface token of `corpus` in first-seen order.
  static Vocab build(const std::vector<Conversation>& corpus, int num_bins);

  int size() const { return static_cast<int>(tokens_.size()); }
  int pad() const { return 0; }
  int eos() const { return 1; }
  int sep() const { return 2; }
  int num_bins() const { return num_bins_; }
  /// Token id of return bin k.
  int bin(int k) const;
  /// Bin index of a token id, or nullopt if it is not a bin token.
  std::optional<int> bin_index(int id) const;
  bool is_special(int id) const { return id >= 0 && id < 3 + num_bins_; }

  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;
  const std::string& token(int id) const;

  TokenIds encode(std::span<const std::string> words) const;
  TokenIds encode(std::string_view text) const;
  Words decode_words(std::span<const int> ids) const;
  std::string decode(std::span<const int> ids) const;

  /// Hash over the ordered token list; checkpoints record it.
  std::string hash() const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_ && num_bins_ == o.num_bins_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int num_bins_ = 0;
};

struct ParaphraseClass {
  std::string id;
  std::vector<TokenIds> members;  // surface realizations, without EOS
};

struct ContextResponsePair {
  TokenIds context;   // speaker-tagged history, ends with SEP
  TokenIds response;  // ends with EOS
  std::optional<ParaphraseClass> paraphrase;
  std::string conversation_id;
  int turn_index = 0;
};

/// One pair per system turn. The history (speaker-tagged turns followed by
/// the responding speaker's tag) is left-truncated to max_context_len tokens
/// and then terminated by SEP.
std::vector<ContextResponsePair> pairs_from_conversations(const std::vector<Conversation>& corpus,
                                                          const Vocab& vocab, int max_context_len);

/// Response tokens with EOS and any special tokens removed.
TokenIds surface(std::span<const int> ids, const Vocab& vocab);

struct Splits {
  std::vector<Conversation> train;
  std::vector<Conversation> val;
  std::vector<Conversation> test;
};

/// 80/10/10 partition of conversations by a seed-stable hash of their ids.
Splits split_by_conversation(const std::vector<Conversation>& corpus, unsigned long long seed);

// JSON Lines: {"id": str, "turns": [{"speaker": "user"|"system", "text": str,
//              "class"?: str, "paraphrases"?: [str]}]}
std::vector<Conversation> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::filesystem::path& path, const std::vector<Conversation>& corpus);
Conversation conversation_from_json(const nlohmann::json& j);
nlohmann::json conversation_to_json(const Conversation& c);

// Synthetic task-oriented dialogues with known paraphrase classes.
struct SyntheticTaskSpec {
  int num_intents = 10;
  // Slot count of each intent; shorter lists repeat cyclically. Each slot
  // count must be 1 or 2.
  std::vector<int> slots_per_intent = {2, 1};
  int values_per_slot = 6;
  int paraphrases = 3;  // P, realizations per system act
  int num_conversations = 600;
  int system_turns = 2;  // 1 or 2
  // Probability that the agent answers with the context-independent
  // "holding" act instead of the task act.
  double holding_rate = 0.3;
  // Share of holding-act turns that use its dominant realization; the rest
  // split evenly across the other realizations. Task acts are uniform.
  double holding_dominance = 0.9;
  unsigned long long seed = 7;

  nlohmann::json to_json() const;
  static SyntheticTaskSpec from_json(const nlohmann::json& j);
};

std::vector<Conversation> generate_synthetic_corpus(const SyntheticTaskSpec& spec);

}  // namespace offrl::corpus
