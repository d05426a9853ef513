// SPDX-License-Identifier: Apache-2.0
//
// Dialogue corpus data model and JSON-lines ingestion.
//
// A corpus directory holds train.jsonl, val.jsonl and test.jsonl, one
// conversation per line:
//   {"conversation_id": str, "topic": str|null,
//    "utterances": [{"utterance_id": str, "speaker": str,
//                    "text": str, "da_label": str}]}
//
// Labels and topics are indexed over all three splits; the token vocabulary
// is built from the train split only, so the method stays inductive. Token
// index 0 is PAD, index 1 is UNK.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "turnwise/errors.hpp"

namespace turnwise {

inline constexpr int kPadTokenIndex = 0;
inline constexpr int kUnkTokenIndex = 1;
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";

// Ignore-label sentinel carried by pad positions; excluded from loss and
// accuracy everywhere.
inline constexpr int kIgnoreLabel = -1;

class Vocab {
 public:
  int add(const std::string& name) {
    auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    int idx = int(names_.size());
    names_.push_back(name);
    index_.emplace(name, idx);
    return idx;
  }

  // -1 when absent.
  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& name_of(int idx) const { return names_.at(size_t(idx)); }
  int size() const { return int(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const Vocab& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t vocab_fingerprint(const Vocab& v) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& name : v.names()) {
    h = fnv1a64(name, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

struct Utterance {
  std::vector<std::string> tokens;
  std::string speaker;
  int da_label = 0;
  std::string utterance_id;

  bool operator==(const Utterance&) const = default;
};

struct Conversation {
  std::string conversation_id;
  std::vector<Utterance> utterances;
  std::optional<int> topic;

  int length() const { return int(utterances.size()); }

  bool operator==(const Conversation&) const = default;
};

struct Corpus {
  std::vector<Conversation> train, val, test;
  Vocab label_vocab;
  Vocab topic_vocab;
  Vocab token_vocab;

  bool has_topics() const { return topic_vocab.size() > 0; }
  int num_classes() const { return label_vocab.size(); }

  const std::vector<Conversation>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "'");
  }

  bool operator==(const Corpus&) const = default;
};

// Lowercase + whitespace split. Empty text maps to a single UNK token.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  if (out.empty()) out.push_back(kUnkToken);
  return out;
}

inline int token_id(const Vocab& token_vocab, const std::string& tok) {
  int idx = token_vocab.index_of(tok);
  return idx < 0 ? kUnkTokenIndex : idx;
}

inline std::vector<int> utterance_token_ids(const Utterance& u, const Vocab& token_vocab) {
  std::vector<int> ids;
  ids.reserve(u.tokens.size());
  for (const auto& t : u.tokens) ids.push_back(token_id(token_vocab, t));
  return ids;
}

enum class CorpusFormat { Jsonl };

namespace detail {

struct RawUtterance {
  std::string id, speaker, label;
  std::vector<std::string> tokens;
};

struct RawConversation {
  std::string id;
  std::optional<std::string> topic;
  std::vector<RawUtterance> utterances;
};

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw schema_error(where + ": missing or non-string field '" + key + "'");
  return j.at(key).get<std::string>();
}

inline std::vector<RawConversation> read_jsonl_split(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw parse_error("cannot open " + file.string());
  std::vector<RawConversation> convs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = file.filename().string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw parse_error(where + ": malformed JSON record: " + e.what());
    }
    if (!j.is_object()) throw schema_error(where + ": record is not an object");
    RawConversation conv;
    conv.id = require_string(j, "conversation_id", where);
    if (j.contains("topic") && !j.at("topic").is_null()) {
      if (!j.at("topic").is_string())
        throw schema_error(where + ": 'topic' must be a string or null");
      conv.topic = j.at("topic").get<std::string>();
    }
    if (!j.contains("utterances") || !j.at("utterances").is_array())
      throw schema_error(where + ": missing 'utterances' array");
    const auto& arr = j.at("utterances");
    if (arr.empty())
      throw schema_error(where + ": conversation '" + conv.id + "' has no utterances");
    std::unordered_set<std::string> seen_ids;
    for (const auto& ju : arr) {
      if (!ju.is_object()) throw schema_error(where + ": utterance is not an object");
      RawUtterance u;
      u.id = require_string(ju, "utterance_id", where);
      u.speaker = require_string(ju, "speaker", where);
      u.label = require_string(ju, "da_label", where);
      u.tokens = tokenize(require_string(ju, "text", where));
      if (!seen_ids.insert(u.id).second)
        throw schema_error(where + ": duplicate utterance_id '" + u.id +
                           "' in conversation '" + conv.id + "'");
      conv.utterances.push_back(std::move(u));
    }
    convs.push_back(std::move(conv));
  }
  return convs;
}

inline std::vector<Conversation> index_split(const std::vector<RawConversation>& raw,
                                             const Vocab& labels, const Vocab& topics) {
  std::vector<Conversation> out;
  out.reserve(raw.size());
  for (const auto& rc : raw) {
    Conversation c;
    c.conversation_id = rc.id;
    if (rc.topic) c.topic = topics.index_of(*rc.topic);
    for (const auto& ru : rc.utterances) {
      Utterance u;
      u.utterance_id = ru.id;
      u.speaker = ru.speaker;
      u.tokens = ru.tokens;
      u.da_label = labels.index_of(ru.label);
      if (u.da_label < 0)
        throw schema_error("da_label '" + ru.label + "' absent from the corpus label set");
      c.utterances.push_back(std::move(u));
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace detail

inline Corpus load_corpus(const std::filesystem::path& dir,
                          CorpusFormat format = CorpusFormat::Jsonl) {
  (void)format;  // jsonl is the only canonical format
  auto raw_train = detail::read_jsonl_split(dir / "train.jsonl");
  auto raw_val = detail::read_jsonl_split(dir / "val.jsonl");
  auto raw_test = detail::read_jsonl_split(dir / "test.jsonl");

  std::set<std::string> label_set, topic_set, token_set;
  for (const auto* split : {&raw_train, &raw_val, &raw_test})
    for (const auto& c : *split) {
      if (c.topic) topic_set.insert(*c.topic);
      for (const auto& u : c.utterances) label_set.insert(u.label);
    }
  for (const auto& c : raw_train)
    for (const auto& u : c.utterances)
      for (const auto& t : u.tokens) token_set.insert(t);

  Corpus corpus;
  for (const auto& l : label_set) corpus.label_vocab.add(l);
  for (const auto& t : topic_set) corpus.topic_vocab.add(t);
  corpus.token_vocab.add(kPadToken);
  corpus.token_vocab.add(kUnkToken);
  for (const auto& t : token_set)
    if (t != kPadToken && t != kUnkToken) corpus.token_vocab.add(t);

  corpus.train = detail::index_split(raw_train, corpus.label_vocab, corpus.topic_vocab);
  corpus.val = detail::index_split(raw_val, corpus.label_vocab, corpus.topic_vocab);
  corpus.test = detail::index_split(raw_test, corpus.label_vocab, corpus.topic_vocab);
  return corpus;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

// Write a corpus back in the canonical format. Reloading the result yields
// an identical Corpus.
inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, const std::vector<Conversation>*> splits[] = {
      {"train.jsonl", &corpus.train}, {"val.jsonl", &corpus.val}, {"test.jsonl", &corpus.test}};
  for (const auto& [file, convs] : splits) {
    std::ofstream out(dir / file);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    for (const auto& c : *convs) {
      nlohmann::json j;
      j["conversation_id"] = c.conversation_id;
      j["topic"] = c.topic ? nlohmann::json(corpus.topic_vocab.name_of(*c.topic))
                           : nlohmann::json(nullptr);
      auto& arr = j["utterances"] = nlohmann::json::array();
      for (const auto& u : c.utterances) {
        nlohmann::json ju;
        ju["utterance_id"] = u.utterance_id;
        ju["speaker"] = u.speaker;
        ju["text"] = join_tokens(u.tokens);
        ju["da_label"] = corpus.label_vocab.name_of(u.da_label);
        arr.push_back(std::move(ju));
      }
      out << j.dump() << '\n';
    }
  }
}

struct SplitStats {
  int64_t conversations = 0;
  int64_t utterances = 0;
  int max_conversation_len = 0;
  int num_parties = 0;  // max distinct speakers in any one conversation
};

struct CorpusStats {
  int num_classes = 0;
  int num_parties = 0;
  SplitStats train, val, test;
};

inline SplitStats split_stats(const std::vector<Conversation>& convs) {
  SplitStats s;
  s.conversations = int64_t(convs.size());
  for (const auto& c : convs) {
    s.utterances += c.length();
    s.max_conversation_len = std::max(s.max_conversation_len, c.length());
    std::unordered_set<std::string> speakers;
    for (const auto& u : c.utterances) speakers.insert(u.speaker);
    s.num_parties = std::max(s.num_parties, int(speakers.size()));
  }
  return s;
}

inline CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats st;
  st.num_classes = corpus.num_classes();
  st.train = split_stats(corpus.train);
  st.val = split_stats(corpus.val);
  st.test = split_stats(corpus.test);
  st.num_parties =
      std::max({st.train.num_parties, st.val.num_parties, st.test.num_parties});
  return st;
}

// One conversation padded to a fixed length. Pad slots hold a PAD-token
// pseudo-utterance and the ignore label.
struct PaddedSequence {
  std::vector<Utterance> utterances;
  std::vector<int> labels;      // kIgnoreLabel at pads
  std::vector<uint8_t> mask;    // 1 = real position

  int64_t real_positions() const {
    int64_t n = 0;
    for (uint8_t m : mask) n += m;
    return n;
  }
};

inline Utterance make_pad_utterance() {
  Utterance u;
  u.tokens = {kPadToken};
  u.speaker = "";
  u.da_label = kIgnoreLabel;
  u.utterance_id = "";
  return u;
}

inline std::vector<PaddedSequence> pad_conversations(const std::vector<Conversation>& convs,
                                                     int target_len) {
  for (const auto& c : convs)
    if (c.length() > target_len)
      throw std::invalid_argument("pad_conversations: conversation '" + c.conversation_id +
                                  "' has length " + std::to_string(c.length()) +
                                  " > target " + std::to_string(target_len));
  std::vector<PaddedSequence> out;
  out.reserve(convs.size());
  for (const auto& c : convs) {
    PaddedSequence p;
    p.utterances = c.utterances;
    for (const auto& u : c.utterances) p.labels.push_back(u.da_label);
    p.mask.assign(size_t(c.length()), 1);
    while (int(p.utterances.size()) < target_len) {
      p.utterances.push_back(make_pad_utterance());
      p.labels.push_back(kIgnoreLabel);
      p.mask.push_back(0);
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace turnwise
