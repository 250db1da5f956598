#pragma once

// Full model: shared token embeddings, transformer encoder, CVGAE reasoning,
// multi-source decoder and output head, with the two training losses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "care/corpus.hpp"
#include "care/cvgae.hpp"
#include "care/errors.hpp"
#include "care/graph.hpp"
#include "care/layers.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"
#include "care/text.hpp"

namespace care {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 300;
  std::size_t num_heads = 2;
  std::size_t d_ff = 1200;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  double dropout = 0.1;
  std::size_t max_nodes = 800;
  std::size_t top_k = 512;
  std::size_t max_context = 256;
  std::size_t max_response = 64;
  std::size_t num_emotions = kEmotionLabels.size();
  bool tie_output = false;
  bool no_reasoning = false;
  bool no_condition = false;
  bool use_latent_mean = false;
  ReconMode recon_mode = ReconMode::sampled;
  std::size_t full_recon_max_nodes = 128;
};

/// Decoder memory sub-layer attending to both the context encoding and the
/// reasoned relations, fused by W_multi.
struct MultiSourceCrossParams {
  AttentionLayer context_attn;
  AttentionLayer relation_attn;
  Tensor w_multi;  // 2d × d
  LayerNormParams ln;

  static MultiSourceCrossParams init(std::size_t d, std::size_t heads, Rng& rng) {
    MultiSourceCrossParams p;
    p.context_attn = AttentionLayer::init(d, heads, rng);
    p.relation_attn = AttentionLayer::init(d, heads, rng);
    p.w_multi = xavier_uniform(2 * d, d, rng);
    p.ln = LayerNormParams::init(d);
    return p;
  }
  void collect(const std::string& prefix, ParamList& out) const {
    context_attn.collect(prefix + ".context_attn", out);
    relation_attn.collect(prefix + ".relation_attn", out);
    out.push_back({prefix + ".w_multi", w_multi});
    ln.collect(prefix + ".ln", out);
  }
};

/// LayerNorm((MultiHead(H, E, E) ⊕ MultiHead(H, R, R)) W_multi + H).
inline Tensor multi_source_cross(const MultiSourceCrossParams& p, const Tensor& h_in, const Tensor& encoded,
                                 const Tensor& relations, const ForwardContext& ctx = {}) {
  const std::size_t d = h_in.cols();
  if (encoded.cols() != d || relations.cols() != d) throw DimensionError("multi_source_cross: width mismatch");
  if (relations.rows() == 0) throw ContractError("multi_source_cross: relation memory needs at least one row");
  if (p.w_multi.rows() != 2 * d || p.w_multi.cols() != d) throw DimensionError("multi_source_cross: W_multi must be 2d x d");
  const Tensor from_context = multi_head_attention(p.context_attn, h_in, encoded, encoded);
  const Tensor from_relations = multi_head_attention(p.relation_attn, h_in, relations, relations);
  const Tensor fused = matmul(concat_cols({from_context, from_relations}), p.w_multi);
  return p.ln(add(ctx.drop(fused), h_in));
}

struct CareModel {
  ModelConfig config;
  Tensor embedding;  // vocab × d, shared by encoder, graph nodes and decoder input
  EncoderStack encoder;
  std::vector<DecoderLayerParams> decoder;
  std::vector<MultiSourceCrossParams> cross;
  CvgaeNets cvgae;
  Tensor w_out;  // d × vocab (unused when tied)
  Tensor b_out;  // 1 × vocab
  PositionalEncoding positions;

  static CareModel init(const ModelConfig& cfg, Rng& rng, std::optional<Tensor> pretrained = std::nullopt) {
    if (cfg.vocab_size <= SpecialTokens::count) throw ContractError("model needs a vocabulary beyond the reserved tokens");
    if (cfg.d_model % cfg.num_heads != 0) throw ContractError("d_model must be divisible by num_heads");
    CareModel m;
    m.config = cfg;
    const std::size_t d = cfg.d_model;
    if (pretrained) {
      if (pretrained->rows() != cfg.vocab_size || pretrained->cols() != d) {
        throw DimensionError("pretrained embeddings must be vocab x d_model");
      }
      m.embedding = *pretrained;
      m.embedding.set_requires_grad(true);
    } else {
      m.embedding = normal_init(cfg.vocab_size, d, 0.02, rng);
    }
    m.encoder = EncoderStack::init(cfg.enc_layers, d, cfg.num_heads, cfg.d_ff, rng);
    for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
      m.decoder.push_back(DecoderLayerParams::init(d, cfg.num_heads, cfg.d_ff, rng));
      m.cross.push_back(MultiSourceCrossParams::init(d, cfg.num_heads, rng));
    }
    m.cvgae = CvgaeNets::init(d, cfg.num_heads, cfg.num_emotions, rng);
    if (!cfg.tie_output) m.w_out = xavier_uniform(d, cfg.vocab_size, rng);
    m.b_out = zeros_param(1, cfg.vocab_size);
    m.positions = PositionalEncoding(cfg.max_context + cfg.max_response + 2, d);
    return m;
  }

  /// Deterministic order; the names double as checkpoint keys.
  ParamList parameters() const {
    ParamList out;
    out.push_back({"embedding", embedding});
    encoder.collect("encoder", out);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      decoder[i].collect("decoder." + std::to_string(i), out);
      cross[i].collect("decoder." + std::to_string(i) + ".cross", out);
    }
    cvgae.collect("cvgae", out);
    if (!config.tie_output) out.push_back({"output.weight", w_out});
    out.push_back({"output.bias", b_out});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  Tensor output_weight() const { return config.tie_output ? transpose(embedding) : w_out; }
};

/// "name rows x cols" per parameter, then the total.
inline std::string parameter_manifest(const CareModel& m) {
  std::ostringstream os;
  for (const auto& p : m.parameters()) os << p.name << ' ' << p.tensor.rows() << 'x' << p.tensor.cols() << '\n';
  os << "total " << m.parameter_count() << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

/// Parameter-independent inputs of one dialogue.
struct PreparedExample {
  std::vector<std::size_t> context_ids;
  std::vector<std::size_t> response_ids;     // gold tokens, no BOS/EOS
  std::vector<std::size_t> recognition_ids;  // context ⊕ [SYS] ⊕ response
  std::size_t emotion = 0;
  CausalGraph graph;
  std::vector<std::size_t> node_ids;
  SparseMatrix a_prior_norm;
  SparseMatrix a_post_norm;

  std::vector<std::size_t> decoder_input() const {
    std::vector<std::size_t> in{SpecialTokens::bos};
    in.insert(in.end(), response_ids.begin(), response_ids.end());
    return in;
  }
  std::vector<std::size_t> decoder_target() const {
    std::vector<std::size_t> out = response_ids;
    out.push_back(SpecialTokens::eos);
    return out;
  }
};

inline PreparedExample prepare_example(const DialogueExample& ex, const Vocab& vocab, const CauseEffectGraph& ceg,
                                       const Stopwords& stopwords, const ModelConfig& cfg) {
  PreparedExample p;
  p.emotion = require_emotion_id(ex.emotion);
  p.context_ids = context_token_ids(ex.context, vocab, cfg.max_context);
  p.response_ids = vocab.encode(tokenize(ex.response));
  if (cfg.max_response > 0 && p.response_ids.size() > cfg.max_response - 1) p.response_ids.resize(cfg.max_response - 1);
  p.recognition_ids = p.context_ids;
  p.recognition_ids.push_back(SpecialTokens::sys);
  p.recognition_ids.insert(p.recognition_ids.end(), p.response_ids.begin(), p.response_ids.end());
  const WordFilter in_vocab = [&vocab](const std::string& w) { return vocab.contains(w); };
  p.graph = build_causal_graph(ex, ceg, stopwords, GraphOptions{cfg.max_nodes}, in_vocab);
  for (const auto& w : p.graph.nodes.words()) p.node_ids.push_back(vocab.id(w));
  p.a_prior_norm = normalize_adjacency(p.graph.a_prior);
  p.a_post_norm = normalize_adjacency(p.graph.a_post);
  return p;
}

struct ForwardDiagnostics {
  double kl_graph = 0.0;
  double kl_context = 0.0;
  double recon = 0.0;
  std::vector<double> token_nll;
};

struct ForwardOutputs {
  Tensor logits;  // |R| × vocab
  ReasonedRelations relations;
  Tensor loss_generation;
  Tensor loss_reasoning;
  Tensor total;
  ForwardDiagnostics diagnostics;
};

struct TrainWeights {
  double generation = 1.0;
  double reasoning = 1.0;
  double kl = 1.0;  // multiplier on both KL terms (warm-up)
};

/// Mean per-token negative log-likelihood of the gold ids.
inline Tensor loss_generation(const Tensor& logits, std::span<const std::size_t> gold_ids) {
  return cross_entropy(logits, gold_ids);
}

/// Reconstruction BCE + KL_graph + KL_context.
inline Tensor loss_reasoning(const Tensor& recon_logits, std::span<const double> targets, double pos_weight,
                             const Tensor& kl_graph, const Tensor& kl_context) {
  return add(add(weighted_bce_logits(recon_logits, targets, pos_weight), kl_graph), kl_context);
}

namespace detail {

inline std::vector<double> token_nll(const Tensor& logits, std::span<const std::size_t> gold) {
  std::vector<double> out(gold.size());
  const std::size_t v = logits.cols();
  const auto x = logits.data();
  for (std::size_t r = 0; r < gold.size(); ++r) {
    const double* row = x.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    out[r] = mx + std::log(z) - row[gold[r]];
  }
  return out;
}

inline ReasonedRelations prior_edge_relations(const CareModel& m, const PreparedExample& ex, const Tensor& node_emb) {
  std::vector<ReasonedRelation> rel;
  for (const auto& e : ex.graph.prior_edges) {
    if (rel.size() >= m.config.top_k) break;
    rel.push_back({e.head, e.tail, 1.0});
  }
  ReasonedRelations out;
  out.relations = std::move(rel);
  out.matrix = relation_matrix(out.relations, node_emb);
  return out;
}

}  // namespace detail

inline Tensor encode_context(const CareModel& m, std::span<const std::size_t> ids, const ForwardContext& ctx) {
  return encode(m.encoder, m.embedding, ids, m.positions, ctx);
}

/// Teacher-forced (or free-running prefix) decoder logits for `input_ids`.
inline Tensor decode_logits(const CareModel& m, const Tensor& encoded, const Tensor& relation_matrix,
                            std::span<const std::size_t> input_ids, const ForwardContext& ctx) {
  const Tensor relations =
      relation_matrix.defined() ? relation_matrix : Tensor::zeros(1, m.config.d_model);
  Tensor h = ctx.drop(embed_tokens(m.embedding, input_ids, m.positions));
  for (std::size_t l = 0; l < m.decoder.size(); ++l) {
    const auto& cross = m.cross[l];
    h = decoder_layer(
        m.decoder[l], h, [&](const Tensor& x) { return multi_source_cross(cross, x, encoded, relations, ctx); }, ctx);
  }
  return add_row(matmul(h, m.output_weight()), m.b_out);
}

/// Inference-path reasoning: prior nets on the prior graph.
inline ReasonedRelations reason_prior(const CareModel& m, const PreparedExample& ex, const Tensor& encoded, Rng* rng) {
  const Tensor node_emb = ex.node_ids.empty() ? Tensor() : gather_rows(m.embedding, ex.node_ids);
  if (ex.node_ids.empty()) return {};
  if (m.config.no_reasoning) return detail::prior_edge_relations(m, ex, node_emb);
  Rng* sampler = m.config.use_latent_mean ? nullptr : rng;
  std::optional<ConditionBundle> cond;
  if (!m.config.no_condition) {
    const Tensor c_ctx = context_condition(m.cvgae, encoded);
    const GaussianParams prior_c = context_prior(m.cvgae, c_ctx);
    cond = make_conditions(c_ctx, emotion_condition(m.cvgae, ex.emotion), sample(prior_c, sampler));
  }
  const GraphLatents latents =
      graph_latents(m.cvgae.graph_prior, node_emb, ex.a_prior_norm, cond ? &cond->c_cond : nullptr, sampler);
  const auto probs = edge_probabilities(latents.z, ex.graph.candidates);
  return select_top_k(probs, ex.graph.candidates, m.config.top_k, node_emb);
}

/// Training forward: recognition nets on the posterior graph, teacher-forced decoder.
inline ForwardOutputs forward_train(const CareModel& m, const PreparedExample& ex, Rng& rng,
                                    const TrainWeights& weights = {}, bool dropout_on = true) {
  if (ex.response_ids.empty() && ex.recognition_ids.size() <= ex.context_ids.size()) {
    throw ContractError("forward_train: gold response required");
  }
  Rng dropout_rng = rng.fork(1);
  Rng latent_rng = rng.fork(2);
  Rng recon_rng = rng.fork(3);
  const ForwardContext ctx{dropout_on, m.config.dropout, &dropout_rng};
  Rng* sampler = m.config.use_latent_mean ? nullptr : &latent_rng;

  ForwardOutputs out;
  const Tensor encoded = encode_context(m, ex.context_ids, ctx);
  Tensor loss_r = Tensor::scalar(0.0);

  if (!ex.node_ids.empty()) {
    const Tensor node_emb = gather_rows(m.embedding, ex.node_ids);
    if (m.config.no_reasoning) {
      out.relations = detail::prior_edge_relations(m, ex, node_emb);
    } else {
      std::optional<ConditionBundle> cond_q, cond_p;
      Tensor kl_c = Tensor::scalar(0.0);
      if (!m.config.no_condition) {
        const Tensor c_ctx = context_condition(m.cvgae, encoded);
        const Tensor c_emo = emotion_condition(m.cvgae, ex.emotion);
        const Tensor encoded_rep = encode_context(m, ex.recognition_ids, ctx);
        const GaussianParams q_c = context_recognition(m.cvgae, encoded_rep);
        const GaussianParams p_c = context_prior(m.cvgae, c_ctx);
        cond_q = make_conditions(c_ctx, c_emo, sample(q_c, sampler));
        cond_p = make_conditions(c_ctx, c_emo, sample(p_c, sampler));
        kl_c = kl(q_c, p_c);
      }
      const GraphLatents q_g = graph_latents(m.cvgae.graph_recognition, node_emb, ex.a_post_norm,
                                             cond_q ? &cond_q->c_cond : nullptr, sampler);
      const GraphLatents p_g = graph_latents(m.cvgae.graph_prior, node_emb, ex.a_prior_norm,
                                             cond_p ? &cond_p->c_cond : nullptr, sampler);
      const Tensor kl_g = scale(kl(q_g.params, p_g.params), 1.0 / static_cast<double>(ex.node_ids.size()));
      const ReconMode mode = (m.config.recon_mode == ReconMode::full && ex.node_ids.size() <= m.config.full_recon_max_nodes)
                                 ? ReconMode::full
                                 : ReconMode::sampled;
      const ReconTargets targets = make_recon_targets(ex.graph, mode, recon_rng);
      const Tensor recon = reconstruction_loss(q_g.z, targets);
      loss_r = add(recon, scale(add(kl_g, kl_c), weights.kl));
      out.diagnostics.kl_graph = kl_g.item();
      out.diagnostics.kl_context = kl_c.item();
      out.diagnostics.recon = recon.item();
      const auto probs = edge_probabilities(q_g.z, ex.graph.candidates);
      out.relations = select_top_k(probs, ex.graph.candidates, m.config.top_k, node_emb);
    }
  }

  const auto input = ex.decoder_input();
  const auto target = ex.decoder_target();
  out.logits = decode_logits(m, encoded, out.relations.matrix, input, ctx);
  out.loss_generation = loss_generation(out.logits, target);
  out.loss_reasoning = loss_r;
  out.total = add(scale(out.loss_generation, weights.generation), scale(loss_r, weights.reasoning));
  out.diagnostics.token_nll = detail::token_nll(out.logits, target);
  return out;
}

/// Teacher-forced evaluation through the inference path (no gold response in
/// the reasoning, no dropout). `rng` drives latent sampling; null uses means.
inline ForwardOutputs forward_eval(const CareModel& m, const PreparedExample& ex, Rng* rng) {
  const ForwardContext ctx = ForwardContext::inference();
  ForwardOutputs out;
  const Tensor encoded = encode_context(m, ex.context_ids, ctx);
  out.relations = reason_prior(m, ex, encoded, rng);
  const auto input = ex.decoder_input();
  const auto target = ex.decoder_target();
  out.logits = decode_logits(m, encoded, out.relations.matrix, input, ctx);
  out.loss_generation = loss_generation(out.logits, target);
  out.loss_reasoning = Tensor::scalar(0.0);
  out.total = out.loss_generation;
  out.diagnostics.token_nll = detail::token_nll(out.logits, target);
  return out;
}

// ---------------------------------------------------------------------------

enum class DecodeStrategy { greedy, top_p };

struct GenerateOptions {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  double top_p = 0.9;
  std::size_t max_len = 64;
};

struct Generation {
  std::vector<std::size_t> tokens;  // without BOS/EOS
  ReasonedRelations relations;
};

/// Relations are reasoned once per example, then tokens are decoded until EOS
/// or `max_len`.
inline Generation generate(const CareModel& m, const PreparedExample& ex, Rng& rng, const GenerateOptions& opts = {}) {
  if (ex.context_ids.empty()) throw ContractError("generate: empty context");
  NoGradGuard no_grad;
  const ForwardContext ctx = ForwardContext::inference();
  Rng latent_rng = rng.fork(2);
  Rng decode_rng = rng.fork(4);
  Generation g;
  const Tensor encoded = encode_context(m, ex.context_ids, ctx);
  g.relations = reason_prior(m, ex, encoded, &latent_rng);
  std::vector<std::size_t> input{SpecialTokens::bos};
  const std::size_t limit = std::min(opts.max_len, m.positions.max_len() - 1);
  while (g.tokens.size() < limit) {
    const Tensor logits = decode_logits(m, encoded, g.relations.matrix, input, ctx);
    const std::size_t v = logits.cols();
    const auto last = logits.data().subspan((logits.rows() - 1) * v, v);
    std::size_t next = 0;
    if (opts.strategy == DecodeStrategy::greedy) {
      next = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      const double mx = *std::max_element(last.begin(), last.end());
      std::vector<std::pair<double, std::size_t>> probs(v);
      double z = 0.0;
      for (std::size_t i = 0; i < v; ++i) {
        probs[i] = {std::exp(last[i] - mx), i};
        z += probs[i].first;
      }
      for (auto& p : probs) p.first /= z;
      std::stable_sort(probs.begin(), probs.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      std::size_t keep = 0;
      double mass = 0.0;
      while (keep < v && (keep == 0 || mass < opts.top_p)) mass += probs[keep++].first;
      double u = decode_rng.uniform() * mass;
      next = probs[keep - 1].second;
      for (std::size_t i = 0; i < keep; ++i) {
        u -= probs[i].first;
        if (u < 0) {
          next = probs[i].second;
          break;
        }
      }
    }
    if (next == SpecialTokens::eos) break;
    g.tokens.push_back(next);
    input.push_back(next);
  }
  return g;
}

/// Human-readable relation lines "head\ttail\tprobability".
inline std::string relations_tsv(const ReasonedRelations& r, const NodeSet& nodes) {
  std::ostringstream os;
  os.precision(6);
  for (const auto& rel : r.relations)
    os << nodes.word(rel.head) << '\t' << nodes.word(rel.tail) << '\t' << std::fixed << rel.probability << '\n';
  return os.str();
}

}  // namespace care
