#pragma once

// Per-example prior/posterior causal graphs built from a word-level
// cause-effect knowledge graph and the dialogue.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "care/corpus.hpp"
#include "care/errors.hpp"
#include "care/layers.hpp"
#include "care/text.hpp"

namespace care {

/// Directed cause→effect edges with positive weights, plus a one-hop
/// neighbor index (in- and out-neighbors). Words are stored lowercase.
class CauseEffectGraph {
 public:
  /// Keeps the larger weight when the edge already exists.
  void add_edge(const std::string& cause, const std::string& effect, double weight) {
    if (!(weight > 0.0) || !std::isfinite(weight)) {
      throw ValidationError("edge weight must be positive: " + cause + " -> " + effect);
    }
    auto& w = out_[cause][effect];
    w = std::max(w, weight);
    neighbors_[cause].insert(effect);
    neighbors_[effect].insert(cause);
  }

  std::optional<double> weight(const std::string& cause, const std::string& effect) const {
    const auto it = out_.find(cause);
    if (it == out_.end()) return std::nullopt;
    const auto jt = it->second.find(effect);
    if (jt == it->second.end()) return std::nullopt;
    return jt->second;
  }

  bool has_edge(const std::string& cause, const std::string& effect) const { return weight(cause, effect).has_value(); }

  /// Effects of `cause`, sorted.
  std::vector<std::string> successors(const std::string& cause) const {
    std::vector<std::string> out;
    if (const auto it = out_.find(cause); it != out_.end())
      for (const auto& [effect, w] : it->second) out.push_back(effect);
    std::sort(out.begin(), out.end());
    return out;
  }

  const std::set<std::string>& neighbors(const std::string& word) const {
    static const std::set<std::string> empty;
    const auto it = neighbors_.find(word);
    return it == neighbors_.end() ? empty : it->second;
  }

  /// Largest weight over both directions between `a` and `b` (0 if unconnected).
  double link_weight(const std::string& a, const std::string& b) const {
    return std::max(weight(a, b).value_or(0.0), weight(b, a).value_or(0.0));
  }

  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& [c, m] : out_) n += m.size();
    return n;
  }
  bool empty() const { return out_.empty(); }

 private:
  std::unordered_map<std::string, std::unordered_map<std::string, double>> out_;
  std::unordered_map<std::string, std::set<std::string>> neighbors_;
};

namespace detail {
inline std::string lowercase(std::string s) {
  for (char& c : s) c = lower(static_cast<unsigned char>(c));
  return s;
}
}  // namespace detail

/// TSV "cause<TAB>effect<TAB>weight"; '#' comment lines and blank lines ignored.
inline CauseEffectGraph parse_ceg(std::istream& in) {
  CauseEffectGraph g;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 3 || cols[0].empty() || cols[1].empty()) {
      throw ParseError("expected 'cause<TAB>effect<TAB>weight'", lineno);
    }
    double w = 0.0;
    const auto& ws = cols[2];
    const auto [p, ec] = std::from_chars(ws.data(), ws.data() + ws.size(), w);
    if (ec != std::errc() || p != ws.data() + ws.size()) throw ParseError("bad weight '" + ws + "'", lineno);
    if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("line " + std::to_string(lineno) + ": weight must be positive");
    g.add_edge(detail::lowercase(cols[0]), detail::lowercase(cols[1]), w);
  }
  return g;
}

inline CauseEffectGraph load_ceg(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open cause-effect graph " + path);
  return parse_ceg(in);
}

// ---------------------------------------------------------------------------

enum class NodeOrigin { emotion, context, neighbor };

inline const char* to_string(NodeOrigin o) {
  switch (o) {
    case NodeOrigin::emotion:
      return "emotion";
    case NodeOrigin::context:
      return "context";
    case NodeOrigin::neighbor:
      return "neighbor";
  }
  return "?";
}

class NodeSet {
 public:
  std::size_t size() const { return words_.size(); }
  bool empty() const { return words_.empty(); }
  const std::string& word(std::size_t i) const { return words_[i]; }
  NodeOrigin origin(std::size_t i) const { return origins_[i]; }
  const std::vector<std::string>& words() const { return words_; }
  std::optional<std::size_t> index(const std::string& w) const {
    const auto it = index_.find(w);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  /// Ignores duplicates; returns whether the word was added.
  bool push(const std::string& w, NodeOrigin origin) {
    if (index_.count(w)) return false;
    index_.emplace(w, words_.size());
    words_.push_back(w);
    origins_.push_back(origin);
    return true;
  }

 private:
  std::vector<std::string> words_;
  std::vector<NodeOrigin> origins_;
  std::unordered_map<std::string, std::size_t> index_;
};

using WordFilter = std::function<bool(const std::string&)>;

/// Emotion word, then context words in first-occurrence order, then one-hop
/// neighbors of both groups by descending link weight (ties lexicographic),
/// truncated to `max_nodes`. Neighbors rejected by `accept` are skipped.
inline NodeSet build_node_set(const std::vector<std::string>& user_words, const std::string& emotion_word,
                              const CauseEffectGraph& ceg, std::size_t max_nodes, const WordFilter& accept = {}) {
  if (emotion_word.empty()) throw ContractError("build_node_set: empty emotion word");
  NodeSet nodes;
  if (max_nodes == 0) return nodes;
  nodes.push(emotion_word, NodeOrigin::emotion);
  for (const auto& w : user_words) {
    if (nodes.size() >= max_nodes) return nodes;
    nodes.push(w, NodeOrigin::context);
  }
  if (nodes.size() >= max_nodes) return nodes;

  std::map<std::string, double> score;
  for (const auto& seed : nodes.words()) {
    for (const auto& nb : ceg.neighbors(seed)) {
      if (nodes.contains(nb)) continue;
      if (accept && !accept(nb)) continue;
      auto& s = score[nb];
      s = std::max(s, ceg.link_weight(seed, nb));
    }
  }
  std::vector<std::pair<std::string, double>> ranked(score.begin(), score.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (const auto& [w, s] : ranked) {
    if (nodes.size() >= max_nodes) break;
    nodes.push(w, NodeOrigin::neighbor);
  }
  return nodes;
}

struct DirectedEdge {
  std::size_t head = 0;
  std::size_t tail = 0;
  friend auto operator<=>(const DirectedEdge&, const DirectedEdge&) = default;
};

/// Every CEG relationship between two distinct nodes, sorted by (head, tail).
inline std::vector<DirectedEdge> candidate_edges(const NodeSet& nodes, const CauseEffectGraph& ceg) {
  std::vector<DirectedEdge> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& effect : ceg.successors(nodes.word(i))) {
      if (auto j = nodes.index(effect); j && *j != i) out.push_back({i, *j});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct EdgeSets {
  std::vector<DirectedEdge> prior;
  std::vector<DirectedEdge> posterior;
};

/// A CEG relationship between two nodes enters the prior set when both
/// endpoints are covered by `covered_prior`, and the posterior set when both
/// are covered by `covered_post`.
inline EdgeSets build_edges(const NodeSet& nodes, const std::set<std::string>& covered_prior,
                            const std::set<std::string>& covered_post, const CauseEffectGraph& ceg) {
  EdgeSets sets;
  for (const auto& e : candidate_edges(nodes, ceg)) {
    const auto& h = nodes.word(e.head);
    const auto& t = nodes.word(e.tail);
    if (covered_prior.count(h) && covered_prior.count(t)) sets.prior.push_back(e);
    if (covered_post.count(h) && covered_post.count(t)) sets.posterior.push_back(e);
  }
  return sets;
}

/// Symmetric {0,1} matrix with A[i][j] = A[j][i] = 1 per directed edge.
inline AdjacencyMatrix adjacency(std::size_t node_count, const std::vector<DirectedEdge>& edges) {
  AdjacencyMatrix a(node_count);
  for (const auto& e : edges) {
    if (e.head >= node_count || e.tail >= node_count) throw IndexError("adjacency: edge endpoint outside node set");
    a.connect(e.head, e.tail);
  }
  return a;
}

struct CausalGraph {
  NodeSet nodes;
  std::vector<DirectedEdge> prior_edges;
  std::vector<DirectedEdge> posterior_edges;
  std::vector<DirectedEdge> candidates;  // all CEG pairs among nodes
  AdjacencyMatrix a_prior;
  AdjacencyMatrix a_post;
};

struct GraphOptions {
  std::size_t max_nodes = 800;
};

/// Content words of `text` in order (duplicates kept), filtered by `accept`.
inline std::vector<std::string> content_words(const std::string& text, const Stopwords& stopwords,
                                              const WordFilter& accept = {}) {
  std::vector<std::string> out;
  for (auto& t : tokenize(text)) {
    if (!stopwords.is_content(t)) continue;
    if (accept && !accept(t)) continue;
    out.push_back(std::move(t));
  }
  return out;
}

/// First content token of the label (the label itself for single-word labels).
inline std::string emotion_word(const std::string& label, const Stopwords& stopwords) {
  const auto tokens = tokenize(label);
  for (const auto& t : tokens)
    if (stopwords.is_content(t)) return t;
  if (tokens.empty()) throw ContractError("empty emotion label");
  return tokens.front();
}

/// Full construction for one dialogue. Coverage uses user utterances only;
/// the posterior additionally covers the next user utterance when present.
inline CausalGraph build_causal_graph(const DialogueExample& ex, const CauseEffectGraph& ceg, const Stopwords& stopwords,
                                      const GraphOptions& opts = {}, const WordFilter& accept = {}) {
  const std::string emo = emotion_word(ex.emotion, stopwords);
  std::vector<std::string> user_words;
  for (const auto& u : ex.user_utterances())
    for (auto& w : content_words(u, stopwords, accept)) user_words.push_back(std::move(w));

  CausalGraph g;
  g.nodes = build_node_set(user_words, emo, ceg, opts.max_nodes, accept);

  std::set<std::string> covered_prior(user_words.begin(), user_words.end());
  covered_prior.insert(emo);
  std::set<std::string> covered_post = covered_prior;
  if (ex.next_user_utterance) {
    for (auto& w : content_words(*ex.next_user_utterance, stopwords)) covered_post.insert(std::move(w));
  }
  auto sets = build_edges(g.nodes, covered_prior, covered_post, ceg);
  g.prior_edges = std::move(sets.prior);
  g.posterior_edges = std::move(sets.posterior);
  g.candidates = candidate_edges(g.nodes, ceg);
  g.a_prior = adjacency(g.nodes.size(), g.prior_edges);
  g.a_post = adjacency(g.nodes.size(), g.posterior_edges);
  return g;
}

/// Canonical text form used for fixture comparisons:
///   nodes: w0(origin) w1(origin) ...
///   prior: head->tail ...
///   posterior: head->tail ...
inline std::string describe(const CausalGraph& g) {
  std::ostringstream os;
  os << "nodes:";
  for (std::size_t i = 0; i < g.nodes.size(); ++i) os << ' ' << g.nodes.word(i) << '(' << to_string(g.nodes.origin(i)) << ')';
  auto edges = [&](const char* name, const std::vector<DirectedEdge>& es) {
    os << '\n' << name << ':';
    for (const auto& e : es) os << ' ' << g.nodes.word(e.head) << "->" << g.nodes.word(e.tail);
  };
  edges("prior", g.prior_edges);
  edges("posterior", g.posterior_edges);
  return os.str();
}

}  // namespace care
