#pragma once

// Corpus ingestion (JSONL), split manifests, vocabulary construction,
// pretrained embedding import and batching.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "care/errors.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"
#include "care/text.hpp"

namespace care {

enum class Speaker { user, bot };

struct Turn {
  Speaker speaker = Speaker::user;
  std::string text;
  friend bool operator==(const Turn&, const Turn&) = default;
};

struct DialogueExample {
  std::vector<Turn> context;  // user first, alternating, ending with a user turn
  std::string emotion;
  std::string response;  // gold bot reply
  std::optional<std::string> next_user_utterance;

  friend bool operator==(const DialogueExample&, const DialogueExample&) = default;

  std::vector<std::string> user_utterances() const {
    std::vector<std::string> out;
    for (const auto& t : context)
      if (t.speaker == Speaker::user) out.push_back(t.text);
    return out;
  }
};

/// Builds an example from plain utterances, assigning user/bot roles alternately.
inline DialogueExample make_example(const std::vector<std::string>& context, std::string emotion, std::string response,
                                    std::optional<std::string> next_user = std::nullopt) {
  DialogueExample ex;
  for (std::size_t i = 0; i < context.size(); ++i)
    ex.context.push_back({i % 2 == 0 ? Speaker::user : Speaker::bot, context[i]});
  ex.emotion = std::move(emotion);
  ex.response = std::move(response);
  ex.next_user_utterance = std::move(next_user);
  return ex;
}

/// Checks the schema invariants; throws ParseError tagged with `line`.
inline void validate_example(const DialogueExample& ex, std::size_t line = 0) {
  if (ex.context.empty()) throw ParseError("context must be nonempty", line);
  for (std::size_t i = 0; i < ex.context.size(); ++i) {
    const Speaker expected = i % 2 == 0 ? Speaker::user : Speaker::bot;
    if (ex.context[i].speaker != expected) {
      throw ParseError("speakers must alternate starting with the user (turn " + std::to_string(i) + ")", line);
    }
  }
  if (ex.context.back().speaker != Speaker::user) {
    throw ParseError("context must end with a user turn (the response is the bot's)", line);
  }
  if (!emotion_id(ex.emotion)) throw ParseError("unknown emotion label '" + ex.emotion + "'", line);
}

inline DialogueExample parse_example(const nlohmann::json& j, std::size_t line = 0) {
  if (!j.is_object()) throw ParseError("example must be a JSON object", line);
  DialogueExample ex;
  const auto ctx = j.find("context");
  if (ctx == j.end() || !ctx->is_array()) throw ParseError("missing array field 'context'", line);
  for (std::size_t i = 0; i < ctx->size(); ++i) {
    const auto& item = (*ctx)[i];
    if (item.is_string()) {
      ex.context.push_back({i % 2 == 0 ? Speaker::user : Speaker::bot, item.get<std::string>()});
    } else if (item.is_object() && item.contains("speaker") && item.contains("text") && item["speaker"].is_string() &&
               item["text"].is_string()) {
      const auto who = item["speaker"].get<std::string>();
      if (who != "user" && who != "bot") throw ParseError("speaker must be 'user' or 'bot'", line);
      ex.context.push_back({who == "user" ? Speaker::user : Speaker::bot, item["text"].get<std::string>()});
    } else {
      throw ParseError("context entries must be strings or {speaker, text} objects", line);
    }
  }
  auto string_field = [&](const char* name) {
    const auto it = j.find(name);
    if (it == j.end() || !it->is_string()) throw ParseError(std::string("missing string field '") + name + "'", line);
    return it->get<std::string>();
  };
  ex.emotion = string_field("emotion");
  ex.response = string_field("response");
  if (const auto it = j.find("next_user_utterance"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ParseError("'next_user_utterance' must be a string or null", line);
    ex.next_user_utterance = it->get<std::string>();
  }
  validate_example(ex, line);
  return ex;
}

inline nlohmann::ordered_json to_json(const DialogueExample& ex) {
  nlohmann::ordered_json j;
  j["context"] = nlohmann::ordered_json::array();
  for (const auto& t : ex.context) j["context"].push_back(t.text);
  j["emotion"] = ex.emotion;
  j["response"] = ex.response;
  if (ex.next_user_utterance) j["next_user_utterance"] = *ex.next_user_utterance;
  return j;
}

/// One example object per line; blank lines skipped.
inline std::vector<DialogueExample> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus " + path);
  std::vector<DialogueExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
    }
    out.push_back(parse_example(j, lineno));
  }
  return out;
}

inline void write_corpus(const std::string& path, const std::vector<DialogueExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus " + path);
  for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

/// Split manifest: one 0-based corpus line index per line.
inline std::vector<std::size_t> load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open split manifest " + path);
  std::vector<std::size_t> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc() || p != line.data() + line.size()) throw ParseError("expected an index", lineno);
    out.push_back(v);
  }
  return out;
}

inline void write_split(const std::string& path, const std::vector<std::size_t>& indices) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write split manifest " + path);
  for (auto i : indices) out << i << '\n';
}

template <class T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= items.size()) throw IndexError("split index " + std::to_string(i) + " outside corpus");
    out.push_back(items[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Counts tokens of every utterance, response, next utterance and emotion label.
inline Vocab build_vocab(const std::vector<DialogueExample>& corpus, std::size_t min_freq = 1) {
  if (corpus.empty()) throw ContractError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  auto count = [&](const std::string& text) {
    for (auto& t : tokenize(text)) ++counts[t];
  };
  for (const auto& ex : corpus) {
    for (const auto& t : ex.context) count(t.text);
    count(ex.response);
    if (ex.next_user_utterance) count(*ex.next_user_utterance);
    count(ex.emotion);
  }
  return Vocab::from_counts(counts, std::max<std::size_t>(min_freq, 1));
}

struct EmbeddingImport {
  Tensor table;  // vocab × d
  std::size_t covered = 0;
  double coverage = 0.0;  // covered / non-reserved vocabulary size
};

/// Rows are N(0, 0.02²) from `rng`, then overwritten by "word v1 ... vd" lines
/// for vocabulary words. An empty `path` skips the file.
inline EmbeddingImport load_embeddings(const std::string& path, const Vocab& vocab, std::size_t d, Rng& rng) {
  std::vector<double> table(vocab.size() * d);
  for (double& x : table) x = rng.normal(0.0, 0.02);
  EmbeddingImport result;
  std::vector<bool> seen(vocab.size(), false);
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embeddings " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string word;
      fields >> word;
      std::vector<double> values;
      std::string tok;
      while (fields >> tok) {
        double v = 0.0;
        const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc() || p != tok.data() + tok.size()) throw ParseError("bad number '" + tok + "'", lineno);
        values.push_back(v);
      }
      if (values.size() != d) {
        throw ParseError("expected " + std::to_string(d) + " values, found " + std::to_string(values.size()), lineno);
      }
      if (!vocab.contains(word)) continue;
      const std::size_t id = vocab.id(word);
      if (id < SpecialTokens::count || seen[id]) continue;
      std::copy(values.begin(), values.end(), table.begin() + static_cast<std::ptrdiff_t>(id * d));
      seen[id] = true;
      ++result.covered;
    }
  }
  const std::size_t regular = vocab.size() - SpecialTokens::count;
  result.coverage = regular ? static_cast<double>(result.covered) / static_cast<double>(regular) : 0.0;
  result.table = Tensor::from(vocab.size(), d, std::move(table), true);
  return result;
}

// ---------------------------------------------------------------------------

/// Model input sequence: [CLS], then each turn as a speaker tag followed by its
/// tokens. Oldest turns are dropped first when longer than `max_len`; a single
/// remaining turn is cut from the front.
inline std::vector<std::size_t> context_token_ids(const std::vector<Turn>& context, const Vocab& vocab,
                                                  std::size_t max_len) {
  std::vector<std::vector<std::size_t>> turns;
  for (const auto& t : context) {
    std::vector<std::size_t> ids{t.speaker == Speaker::user ? SpecialTokens::usr : SpecialTokens::sys};
    for (auto id : vocab.encode(tokenize(t.text))) ids.push_back(id);
    turns.push_back(std::move(ids));
  }
  std::size_t total = 1;
  for (const auto& t : turns) total += t.size();
  std::size_t first = 0;
  while (total > max_len && first + 1 < turns.size()) total -= turns[first++].size();
  std::vector<std::size_t> out{SpecialTokens::cls};
  for (std::size_t i = first; i < turns.size(); ++i) out.insert(out.end(), turns[i].begin(), turns[i].end());
  if (out.size() > max_len && max_len >= 1) {
    std::vector<std::size_t> cut{SpecialTokens::cls};
    cut.insert(cut.end(), out.end() - static_cast<std::ptrdiff_t>(max_len - 1), out.end());
    out = std::move(cut);
  }
  return out;
}

struct Batch {
  std::vector<std::size_t> indices;                 // into the example list
  std::vector<std::vector<std::size_t>> contexts;   // padded with PAD to the batch max
  std::vector<std::vector<unsigned char>> masks;    // 1 for real tokens
};

/// Fisher-Yates with the counter-based generator.
inline void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

/// Seeded shuffle into consecutive batches; the last batch may be short.
/// With `bucket_by_length`, indices are sorted by length inside windows of
/// 8 batches before slicing.
inline std::vector<Batch> make_batches(const std::vector<std::vector<std::size_t>>& contexts, std::size_t batch_size,
                                       Rng rng, bool bucket_by_length = false) {
  if (batch_size == 0) throw ContractError("batch_size must be >= 1");
  std::vector<std::size_t> order(contexts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  if (bucket_by_length) {
    const std::size_t window = batch_size * 8;
    for (std::size_t s = 0; s < order.size(); s += window) {
      auto end = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + window));
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(s), end,
                       [&](std::size_t a, std::size_t b) { return contexts[a].size() < contexts[b].size(); });
    }
  }
  std::vector<Batch> batches;
  for (std::size_t s = 0; s < order.size(); s += batch_size) {
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch_size)));
    std::size_t width = 0;
    for (auto i : b.indices) width = std::max(width, contexts[i].size());
    for (auto i : b.indices) {
      auto row = contexts[i];
      std::vector<unsigned char> mask(row.size(), 1);
      row.resize(width, SpecialTokens::pad);
      mask.resize(width, 0);
      b.contexts.push_back(std::move(row));
      b.masks.push_back(std::move(mask));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace care
