#pragma once

// Tokenizer, vocabulary, stopwords and the emotion label set.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "care/errors.hpp"

namespace care {

// ---------------------------------------------------------------------------
// Tokenizer. Byte-level rules, independent of locale:
//   * ASCII letters are lowercased; bytes >= 0x80 are word characters;
//   * whitespace separates tokens;
//   * an apostrophe starts a new token and keeps the word characters that
//     follow it ("I'm" -> "i", "'m"); a bare apostrophe is its own token;
//   * every other ASCII punctuation byte is a single-character token.

namespace detail {
inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_word(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}
inline char lower(unsigned char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c); }
}  // namespace detail

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (detail::is_space(c)) {
      flush();
    } else if (detail::is_word(c)) {
      current.push_back(detail::lower(c));
    } else if (c == '\'') {
      flush();
      current.push_back('\'');
      if (i + 1 >= text.size() || !detail::is_word(static_cast<unsigned char>(text[i + 1]))) flush();
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

inline std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ") {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += sep;
    s += tokens[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Emotion labels of the 32-category benchmark, in alphabetical order; the
// index is the label id.

inline constexpr std::array<std::string_view, 32> kEmotionLabels = {
    "afraid",    "angry",     "annoyed",    "anticipating", "anxious",  "apprehensive", "ashamed",   "caring",
    "confident", "content",   "devastated", "disappointed", "disgusted", "embarrassed", "excited",   "faithful",
    "furious",   "grateful",  "guilty",     "hopeful",      "impressed", "jealous",     "joyful",    "lonely",
    "nostalgic", "prepared",  "proud",      "sad",          "sentimental", "surprised", "terrified", "trusting"};

inline std::optional<std::size_t> emotion_id(std::string_view label) {
  std::string lowered;
  for (char c : label) lowered.push_back(detail::lower(static_cast<unsigned char>(c)));
  for (std::size_t i = 0; i < kEmotionLabels.size(); ++i)
    if (kEmotionLabels[i] == lowered) return i;
  return std::nullopt;
}

inline std::size_t require_emotion_id(std::string_view label) {
  if (auto id = emotion_id(label)) return *id;
  std::string valid;
  for (auto l : kEmotionLabels) {
    if (!valid.empty()) valid += ", ";
    valid += l;
  }
  throw LabelError("unknown emotion label '" + std::string(label) + "'; valid labels: " + valid);
}

// ---------------------------------------------------------------------------
// Stopwords (function words). Content words are the tokens that survive the
// filter and contain at least one letter.

inline constexpr std::string_view kDefaultStopwords[] = {
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could",
    "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has",
    "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if",
    "in", "into", "is", "it", "its", "itself", "just", "me", "might", "more", "most", "must", "my", "myself",
    "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves",
    "out", "over", "own", "same", "shall", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those", "through",
    "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves", "'s", "'m", "'re", "'ve", "'ll", "'d", "'t", "n't", "s", "t", "m", "oh", "yeah", "yes",
    "ok", "okay", "well", "really", "also", "im", "dont"};

class Stopwords {
 public:
  Stopwords() : words_(std::begin(kDefaultStopwords), std::end(kDefaultStopwords)) {}
  explicit Stopwords(std::set<std::string, std::less<>> words) : words_(std::move(words)) {}

  /// One word per line; blank lines and '#' comments ignored.
  static Stopwords load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open stopword list " + path);
    std::set<std::string, std::less<>> words;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (line.empty() || line.front() == '#') continue;
      std::string lowered;
      for (char c : line) lowered.push_back(detail::lower(static_cast<unsigned char>(c)));
      words.insert(lowered);
    }
    return Stopwords(std::move(words));
  }

  bool contains(std::string_view w) const { return words_.find(w) != words_.end(); }

  bool is_content(std::string_view token) const {
    if (contains(token)) return false;
    return std::any_of(token.begin(), token.end(), [](char c) {
      const auto u = static_cast<unsigned char>(c);
      return (u >= 'a' && u <= 'z') || u >= 0x80;
    });
  }

 private:
  std::set<std::string, std::less<>> words_;
};

// ---------------------------------------------------------------------------
// Vocabulary. Reserved ids are fixed; the rest are assigned by descending
// frequency with lexicographic tie-breaks.

struct SpecialTokens {
  static constexpr std::size_t pad = 0;
  static constexpr std::size_t unk = 1;
  static constexpr std::size_t bos = 2;
  static constexpr std::size_t eos = 3;
  static constexpr std::size_t usr = 4;
  static constexpr std::size_t sys = 5;
  static constexpr std::size_t cls = 6;
  static constexpr std::size_t count = 7;
};

inline constexpr std::array<std::string_view, SpecialTokens::count> kSpecialTokenNames = {
    "<pad>", "<unk>", "<bos>", "<eos>", "[USR]", "[SYS]", "[CLS]"};

class Vocab {
 public:
  Vocab() {
    for (auto name : kSpecialTokenNames) add(std::string(name));
  }

  /// Builds from token frequency counts; tokens with count < min_freq map to UNK.
  static Vocab from_counts(const std::map<std::string, std::size_t>& counts, std::size_t min_freq) {
    std::vector<std::pair<std::string, std::size_t>> items;
    for (const auto& [tok, n] : counts)
      if (n >= min_freq) items.emplace_back(tok, n);
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    for (const auto& [tok, n] : items) v.add(tok);
    return v;
  }

  /// One token per line, id = line index; the reserved block must come first.
  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open vocabulary " + path);
    Vocab v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (lineno <= SpecialTokens::count && line != kSpecialTokenNames[lineno - 1]) {
        throw ParseError("vocabulary must start with the reserved tokens", lineno);
      }
      if (v.index_.count(line)) throw ParseError("duplicate vocabulary token '" + line + "'", lineno);
      v.add(line);
    }
    if (v.size() < SpecialTokens::count) throw ParseError("vocabulary is missing reserved tokens");
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const { return index_.find(std::string(token)) != index_.end(); }
  std::size_t id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? SpecialTokens::unk : it->second;
  }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[id];
  }
  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }
  /// Drops reserved tokens other than UNK.
  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> out;
    for (std::size_t i : ids) {
      if (i == SpecialTokens::unk || i >= SpecialTokens::count) out.push_back(token(i));
    }
    return out;
  }

  /// FNV-1a over the newline-joined token list.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
      h ^= '\n';
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void add(std::string token) {
    index_.emplace(token, tokens_.size());
    tokens_.push_back(std::move(token));
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace care
