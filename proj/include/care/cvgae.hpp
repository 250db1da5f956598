#pragma once

// Conditional variational graph auto-encoder: condition vectors, recognition
// and prior nets for the context latent and the graph latents, inner-product
// adjacency reconstruction and top-k relation selection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "care/errors.hpp"
#include "care/graph.hpp"
#include "care/layers.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"

namespace care {

struct GaussianParams {
  Tensor mu;
  Tensor log_sigma;  // clamped to [kLogSigmaMin, kLogSigmaMax]
};

/// Reparameterized sample, or the mean when `rng` is null.
inline Tensor sample(const GaussianParams& g, Rng* rng) {
  if (rng == nullptr) return g.mu;
  return gaussian_reparam_sample(g.mu, g.log_sigma, *rng);
}

inline Tensor kl(const GaussianParams& q, const GaussianParams& p) {
  return kl_diag_gaussians(q.mu, q.log_sigma, p.mu, p.log_sigma);
}

/// Single hidden layer of width d, ReLU, linear output.
struct LatentMlp {
  Linear hidden;
  Linear out;

  static LatentMlp init(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng) {
    return {Linear::init(d_in, d_hidden, rng), Linear::init(d_hidden, d_out, rng)};
  }
  Tensor operator()(const Tensor& x) const { return out(relu(hidden(x))); }
  void collect(const std::string& prefix, ParamList& params) const {
    hidden.collect(prefix + ".hidden", params);
    out.collect(prefix + ".out", params);
  }
};

/// Gaussian over the context latent: separate MLPs for the mean and log-sigma.
struct ContextLatentNet {
  LatentMlp mu;
  LatentMlp log_sigma;

  static ContextLatentNet init(std::size_t d, Rng& rng) {
    auto m = LatentMlp::init(d, d, d, rng);
    auto s = LatentMlp::init(d, d, d, rng);
    return {std::move(m), std::move(s)};
  }
  GaussianParams operator()(const Tensor& x) const {
    return {mu(x), clamp(log_sigma(x), kLogSigmaMin, kLogSigmaMax)};
  }
  void collect(const std::string& prefix, ParamList& params) const {
    mu.collect(prefix + ".mu", params);
    log_sigma.collect(prefix + ".log_sigma", params);
  }
};

/// GCN_h -> attention over the condition rows -> GCN_mu / GCN_sigma.
struct GraphLatentNet {
  GcnLayer hidden;
  AttentionLayer cond_attn;
  GcnLayer mu;
  GcnLayer log_sigma;

  static GraphLatentNet init(std::size_t d_in, std::size_t d_hidden, std::size_t d_latent, std::size_t heads, Rng& rng) {
    GraphLatentNet n;
    n.hidden = GcnLayer::init(d_in, d_hidden, Activation::relu, rng);
    n.cond_attn = AttentionLayer::init(d_hidden, heads, rng);
    n.mu = GcnLayer::init(d_hidden, d_latent, Activation::linear, rng);
    n.log_sigma = GcnLayer::init(d_hidden, d_latent, Activation::linear, rng);
    return n;
  }
  void collect(const std::string& prefix, ParamList& params) const {
    hidden.collect(prefix + ".gcn_hidden", params);
    cond_attn.collect(prefix + ".cond_attn", params);
    mu.collect(prefix + ".gcn_mu", params);
    log_sigma.collect(prefix + ".gcn_log_sigma", params);
  }
};

struct ConditionBundle {
  Tensor c_ctx;
  Tensor c_emo;
  Tensor z_c;
  Tensor c_cond;  // rows: c_ctx, c_emo, z_c
};

inline ConditionBundle make_conditions(Tensor c_ctx, Tensor c_emo, Tensor z_c) {
  ConditionBundle b{std::move(c_ctx), std::move(c_emo), std::move(z_c), {}};
  b.c_cond = concat_rows({b.c_ctx, b.c_emo, b.z_c});
  return b;
}

struct GraphLatents {
  Tensor z;  // |V| × d_latent
  GaussianParams params;
};

/// Shared hidden state Ĥ = GCN_h(V, Ã); with a condition it is replaced by
/// MultiHead(Ĥ, c_cond, c_cond), without one it passes straight through.
/// Then mu = GCN_mu(H, Ã), log_sigma = GCN_sigma(H, Ã), and Z is sampled
/// (mean when `rng` is null).
inline GraphLatents graph_latents(const GraphLatentNet& net, const Tensor& node_features, const SparseMatrix& normalized,
                                  const Tensor* c_cond, Rng* rng) {
  if (normalized.rows != node_features.rows()) {
    throw DimensionError("graph_latents: adjacency covers " + std::to_string(normalized.rows) + " nodes but " +
                         std::to_string(node_features.rows()) + " feature rows given");
  }
  const Tensor h_hat = gcn_forward(net.hidden, node_features, normalized);
  const Tensor h = c_cond ? multi_head_attention(net.cond_attn, h_hat, *c_cond, *c_cond) : h_hat;
  GraphLatents out;
  out.params.mu = gcn_forward(net.mu, h, normalized);
  out.params.log_sigma = clamp(gcn_forward(net.log_sigma, h, normalized), kLogSigmaMin, kLogSigmaMax);
  out.z = sample(out.params, rng);
  return out;
}

/// Â = sigmoid(Z Zᵀ).
inline Tensor reconstruct_adjacency(const Tensor& z) { return sigmoid(gram(z)); }

/// sigmoid(z_h · z_t) for each pair, as plain values.
inline std::vector<double> edge_probabilities(const Tensor& z, const std::vector<DirectedEdge>& pairs) {
  std::vector<double> out(pairs.size());
  const std::size_t d = z.cols();
  const auto zd = z.data();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [h, t] = pairs[k];
    if (h >= z.rows() || t >= z.rows()) throw IndexError("edge_probabilities: node index out of range");
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += zd[h * d + c] * zd[t * d + c];
    out[k] = detail::sigmoid(s);
  }
  return out;
}

struct ReasonedRelation {
  std::size_t head = 0;
  std::size_t tail = 0;
  double probability = 0.0;
};

struct ReasonedRelations {
  std::vector<ReasonedRelation> relations;
  Tensor matrix;  // k × d rows emb(head) + emb(tail); undefined when empty
};

/// Orders candidates by probability (descending; ties by head then tail
/// index) and keeps the first min(k, |candidates|).
inline std::vector<ReasonedRelation> rank_relations(std::span<const double> probabilities,
                                                    const std::vector<DirectedEdge>& candidates, std::size_t k) {
  if (probabilities.size() != candidates.size()) throw DimensionError("rank_relations: one probability per candidate");
  std::vector<ReasonedRelation> all;
  all.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    all.push_back({candidates[i].head, candidates[i].tail, probabilities[i]});
  std::sort(all.begin(), all.end(), [](const ReasonedRelation& a, const ReasonedRelation& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    if (a.head != b.head) return a.head < b.head;
    return a.tail < b.tail;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

inline Tensor relation_matrix(const std::vector<ReasonedRelation>& relations, const Tensor& node_embeddings) {
  if (relations.empty()) return {};
  std::vector<std::size_t> heads, tails;
  for (const auto& r : relations) {
    heads.push_back(r.head);
    tails.push_back(r.tail);
  }
  return add(gather_rows(node_embeddings, heads), gather_rows(node_embeddings, tails));
}

/// Top-k selection over Â restricted to candidate pairs; r_i = emb(head) + emb(tail).
inline ReasonedRelations select_top_k(std::span<const double> probabilities, const std::vector<DirectedEdge>& candidates,
                                      std::size_t k, const Tensor& node_embeddings) {
  ReasonedRelations out;
  out.relations = rank_relations(probabilities, candidates, k);
  out.matrix = relation_matrix(out.relations, node_embeddings);
  return out;
}

/// Same, reading probabilities from a full |V|×|V| Â.
inline ReasonedRelations select_top_k(const Tensor& a_hat, const std::vector<DirectedEdge>& candidates, std::size_t k,
                                      const Tensor& node_embeddings) {
  std::vector<double> probs;
  probs.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (c.head >= a_hat.rows() || c.tail >= a_hat.cols()) throw IndexError("select_top_k: candidate outside Â");
    probs.push_back(a_hat.at(c.head, c.tail));
  }
  return select_top_k(probs, candidates, k, node_embeddings);
}

// ---------------------------------------------------------------------------
// Reconstruction targets

enum class ReconMode { sampled, full };

struct ReconTargets {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> targets;
  double pos_weight = 1.0;
};

/// Sampled mode: every candidate CEG pair labelled by the posterior adjacency,
/// plus uniformly drawn non-CEG pairs (as many as there are positives) labelled
/// 0. Full mode: all |V|² ordered pairs against A_post + I. In both modes
/// pos_weight = negatives / positives (1 when there are no positives).
inline ReconTargets make_recon_targets(const CausalGraph& g, ReconMode mode, Rng& rng) {
  ReconTargets rt;
  const std::size_t n = g.nodes.size();
  if (mode == ReconMode::full) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        rt.pairs.emplace_back(i, j);
        rt.targets.push_back((i == j || g.a_post.at(i, j)) ? 1.0 : 0.0);
      }
    }
  } else {
    std::set<std::pair<std::size_t, std::size_t>> ceg_pairs;
    std::size_t positives = 0;
    for (const auto& c : g.candidates) {
      ceg_pairs.emplace(c.head, c.tail);
      ceg_pairs.emplace(c.tail, c.head);
      rt.pairs.emplace_back(c.head, c.tail);
      const bool pos = g.a_post.at(c.head, c.tail);
      rt.targets.push_back(pos ? 1.0 : 0.0);
      positives += pos ? 1 : 0;
    }
    const std::size_t available = n > 1 ? n * (n - 1) - ceg_pairs.size() : 0;
    const std::size_t wanted = std::min(std::max<std::size_t>(positives, 1), available);
    std::set<std::pair<std::size_t, std::size_t>> drawn;
    // Rejection sampling over ordered pairs; the graphs are sparse.
    for (std::size_t tries = 0; drawn.size() < wanted && tries < 100 * (wanted + 1); ++tries) {
      const std::size_t i = rng.below(n);
      const std::size_t j = rng.below(n);
      if (i == j || ceg_pairs.count({i, j}) || drawn.count({i, j})) continue;
      drawn.emplace(i, j);
      rt.pairs.emplace_back(i, j);
      rt.targets.push_back(0.0);
    }
  }
  std::size_t pos = 0;
  for (double t : rt.targets) pos += t == 1.0 ? 1 : 0;
  const std::size_t neg = rt.targets.size() - pos;
  rt.pos_weight = pos ? static_cast<double>(neg) / static_cast<double>(pos) : 1.0;
  if (pos && neg == 0) rt.pos_weight = 1.0;
  return rt;
}

/// Weighted BCE of sigmoid(z_i · z_j) against the targets; zero when there are no pairs.
inline Tensor reconstruction_loss(const Tensor& z, const ReconTargets& rt) {
  if (rt.pairs.empty()) return Tensor::scalar(0.0);
  return weighted_bce_logits(pair_dot(z, rt.pairs), rt.targets, rt.pos_weight);
}

// ---------------------------------------------------------------------------

/// All CVGAE parameters.
struct CvgaeNets {
  Tensor v_rand;         // 1 × d query for the context summaries
  AttentionLayer summary_attn;
  Tensor emotion_table;  // num_emotions × d
  ContextLatentNet context_recognition;
  ContextLatentNet context_prior;
  GraphLatentNet graph_recognition;
  GraphLatentNet graph_prior;

  static CvgaeNets init(std::size_t d, std::size_t heads, std::size_t num_emotions, Rng& rng) {
    CvgaeNets n;
    n.v_rand = normal_init(1, d, 1.0, rng);
    n.summary_attn = AttentionLayer::init(d, heads, rng);
    n.emotion_table = normal_init(num_emotions, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    n.context_recognition = ContextLatentNet::init(d, rng);
    n.context_prior = ContextLatentNet::init(d, rng);
    n.graph_recognition = GraphLatentNet::init(d, d, d, heads, rng);
    n.graph_prior = GraphLatentNet::init(d, d, d, heads, rng);
    return n;
  }

  void collect(const std::string& prefix, ParamList& params) const {
    params.push_back({prefix + ".v_rand", v_rand});
    summary_attn.collect(prefix + ".summary_attn", params);
    params.push_back({prefix + ".emotion_table", emotion_table});
    context_recognition.collect(prefix + ".context_recognition", params);
    context_prior.collect(prefix + ".context_prior", params);
    graph_recognition.collect(prefix + ".graph_recognition", params);
    graph_prior.collect(prefix + ".graph_prior", params);
  }
};

/// c_ctx = MultiHead(v_rand, E_out, E_out).
inline Tensor context_condition(const CvgaeNets& nets, const Tensor& encoded) {
  if (encoded.rows() == 0) throw ContractError("context_condition: empty encoder output");
  return multi_head_attention(nets.summary_attn, nets.v_rand, encoded, encoded);
}

/// c_emo = E^emo[e].
inline Tensor emotion_condition(const CvgaeNets& nets, std::size_t emotion) {
  if (emotion >= nets.emotion_table.rows()) {
    throw LabelError("emotion id " + std::to_string(emotion) + " outside " +
                     std::to_string(nets.emotion_table.rows()) + " labels");
  }
  return gather_rows(nets.emotion_table, {emotion});
}

/// q(z^c | C, R): the summary attention over the encoding of context ⊕ gold response.
inline GaussianParams context_recognition(const CvgaeNets& nets, const Tensor& encoded_with_response) {
  if (encoded_with_response.rows() == 0) throw ContractError("context_recognition: gold response required");
  return nets.context_recognition(context_condition(nets, encoded_with_response));
}

/// p(z^c' | C) from c_ctx.
inline GaussianParams context_prior(const CvgaeNets& nets, const Tensor& c_ctx) { return nets.context_prior(c_ctx); }

}  // namespace care
