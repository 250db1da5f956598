#pragma once

// Conversion of the upstream empathetic-dialogue CSV shards into the corpus
// JSONL plus split manifests.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "care/corpus.hpp"
#include "care/errors.hpp"
#include "care/text.hpp"

namespace care {

/// Upstream rows: conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags
/// with literal commas inside text written as "_comma_".
struct RawUtterance {
  std::string conv_id;
  std::size_t index = 0;
  std::string emotion;
  std::string speaker;
  std::string text;
};

struct ShardReport {
  std::string name;
  std::size_t rows = 0;
  std::size_t skipped_rows = 0;
  std::size_t skipped_conversations = 0;
  std::size_t conversations = 0;
  std::size_t examples = 0;
};

namespace detail {

inline std::string unescape_commas(std::string s) {
  const std::string marker = "_comma_";
  std::size_t pos = 0;
  while ((pos = s.find(marker, pos)) != std::string::npos) {
    s.replace(pos, marker.size(), ",");
    pos += 1;
  }
  return s;
}

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto c = line.find(',', start);
    out.push_back(line.substr(start, c == std::string::npos ? std::string::npos : c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return out;
}

}  // namespace detail

/// One example per bot turn: the preceding turns are the context, the bot
/// turn the response, and the following user turn (if any) the next utterance.
inline std::vector<DialogueExample> conversation_examples(const std::vector<std::string>& turns, const std::string& emotion) {
  std::vector<DialogueExample> out;
  for (std::size_t i = 1; i < turns.size(); i += 2) {
    std::vector<std::string> context(turns.begin(), turns.begin() + static_cast<std::ptrdiff_t>(i));
    std::optional<std::string> next;
    if (i + 1 < turns.size()) next = turns[i + 1];
    out.push_back(make_example(context, emotion, turns[i], next));
  }
  return out;
}

/// Parses one shard; malformed rows and conversations are counted, not fatal.
inline std::vector<DialogueExample> convert_shard(std::istream& in, ShardReport& report) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<RawUtterance>> convs;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header) {
      header = false;
      if (line.rfind("conv_id", 0) == 0) continue;
    }
    if (line.empty()) continue;
    ++report.rows;
    const auto cols = detail::split_commas(line);
    std::size_t idx = 0;
    const bool idx_ok = cols.size() == 8 &&
                        std::from_chars(cols[1].data(), cols[1].data() + cols[1].size(), idx).ec == std::errc() && idx > 0;
    if (!idx_ok || !emotion_id(cols[2]) || cols[0].empty() || cols[5].empty()) {
      ++report.skipped_rows;
      continue;
    }
    RawUtterance u{cols[0], idx, cols[2], cols[4], detail::unescape_commas(cols[5])};
    if (!convs.count(u.conv_id)) order.push_back(u.conv_id);
    convs[u.conv_id].push_back(std::move(u));
  }
  std::vector<DialogueExample> out;
  for (const auto& id : order) {
    auto utts = convs[id];
    std::stable_sort(utts.begin(), utts.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    bool ok = true;
    for (std::size_t i = 0; i < utts.size() && ok; ++i) {
      ok = utts[i].index == i + 1 && utts[i].emotion == utts[0].emotion;
      if (ok && i >= 1) ok = utts[i].speaker != utts[i - 1].speaker;
    }
    if (!ok || utts.size() < 2) {
      ++report.skipped_conversations;
      continue;
    }
    std::vector<std::string> turns;
    for (const auto& u : utts) turns.push_back(u.text);
    auto examples = conversation_examples(turns, std::string(kEmotionLabels[*emotion_id(utts[0].emotion)]));
    ++report.conversations;
    report.examples += examples.size();
    for (auto& e : examples) out.push_back(std::move(e));
  }
  return out;
}

struct ConversionResult {
  std::vector<DialogueExample> corpus;
  std::map<std::string, std::vector<std::size_t>> splits;  // shard name → corpus line indices
  std::vector<ShardReport> reports;
};

/// Converts the named shards (e.g. train, valid, test) in order into one corpus.
inline ConversionResult convert_shards(const std::vector<std::pair<std::string, std::string>>& shards) {
  ConversionResult r;
  for (const auto& [name, path] : shards) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open upstream shard " + path);
    ShardReport rep;
    rep.name = name;
    auto examples = convert_shard(in, rep);
    auto& idx = r.splits[name];
    for (auto& e : examples) {
      idx.push_back(r.corpus.size());
      r.corpus.push_back(std::move(e));
    }
    r.reports.push_back(rep);
  }
  return r;
}

}  // namespace care
