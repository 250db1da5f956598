#pragma once

// Transformer and graph-convolution building blocks.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "care/errors.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"

namespace care {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

/// Per-forward state: dropout only fires when `training` and a generator is attached.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Tensor drop(const Tensor& x) const {
    if (!training || dropout <= 0.0 || rng == nullptr) return x;
    return care::dropout(x, dropout, *rng);
  }
  static ForwardContext inference() { return {}; }
};

inline Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(rows * cols);
  for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * limit;
  return Tensor::from(rows, cols, std::move(v), true);
}

inline Tensor normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(rows, cols, std::move(v), true);
}

inline Tensor zeros_param(std::size_t rows, std::size_t cols) { return Tensor::zeros(rows, cols, true); }

inline Tensor identity(std::size_t n, bool requires_grad = false) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from(n, n, std::move(v), requires_grad);
}

// ---------------------------------------------------------------------------

struct Linear {
  Tensor weight;  // in × out
  Tensor bias;    // 1 × out

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    return {xavier_uniform(in, out, rng), zeros_param(1, out)};
  }
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNormParams init(std::size_t d) {
    return {Tensor::from(1, d, std::vector<double>(d, 1.0), true), zeros_param(1, d)};
  }
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

struct FeedForward {
  Linear inner;
  Linear outer;

  static FeedForward init(std::size_t d, std::size_t d_ff, Rng& rng) {
    return {Linear::init(d, d_ff, rng), Linear::init(d_ff, d, rng)};
  }
  Tensor operator()(const Tensor& x) const { return outer(relu(inner(x))); }
  void collect(const std::string& prefix, ParamList& out) const {
    inner.collect(prefix + ".inner", out);
    outer.collect(prefix + ".outer", out);
  }
};

/// Multi-head scaled dot-product attention with d×d query/key/value/output projections.
struct AttentionLayer {
  std::size_t num_heads = 1;
  Tensor wq, wk, wv, wo;

  static AttentionLayer init(std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ContractError("attention: model width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    AttentionLayer l;
    l.num_heads = heads;
    l.wq = xavier_uniform(d, d, rng);
    l.wk = xavier_uniform(d, d, rng);
    l.wv = xavier_uniform(d, d, rng);
    l.wo = xavier_uniform(d, d, rng);
    return l;
  }
  std::size_t width() const { return wq.rows(); }
  std::size_t head_dim() const { return width() / num_heads; }
  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".wo", wo});
  }
};

/// softmax(Q Kᵀ / √d_head) V per head, heads concatenated then output-projected.
/// `mask`, when given, is query_rows × key_rows.
inline Tensor multi_head_attention(const AttentionLayer& layer, const Tensor& query, const Tensor& key,
                                   const Tensor& value, const Mask* mask = nullptr) {
  const std::size_t d = layer.width();
  if (query.cols() != d || key.cols() != d || value.cols() != d) {
    throw DimensionError("attention: inputs must have " + std::to_string(d) + " columns");
  }
  if (key.rows() != value.rows()) throw DimensionError("attention: key/value row counts differ");
  if (mask && (mask->rows != query.rows() || mask->cols != key.rows())) {
    throw DimensionError("attention: mask must be " + std::to_string(query.rows()) + "x" + std::to_string(key.rows()));
  }
  const Tensor q = matmul(query, layer.wq);
  const Tensor k = matmul(key, layer.wk);
  const Tensor v = matmul(value, layer.wv);
  const std::size_t hd = layer.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  if (layer.num_heads == 1) {
    const Tensor weights = softmax(scale(matmul_nt(q, k), inv_sqrt), Axis::cols, mask);
    return matmul(matmul(weights, v), layer.wo);
  }
  std::vector<Tensor> heads;
  heads.reserve(layer.num_heads);
  for (std::size_t h = 0; h < layer.num_heads; ++h) {
    const Tensor qh = slice_cols(q, h * hd, hd);
    const Tensor kh = slice_cols(k, h * hd, hd);
    const Tensor vh = slice_cols(v, h * hd, hd);
    const Tensor weights = softmax(scale(matmul_nt(qh, kh), inv_sqrt), Axis::cols, mask);
    heads.push_back(matmul(weights, vh));
  }
  return matmul(concat_cols(heads), layer.wo);
}

// ---------------------------------------------------------------------------

/// Fixed sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos.
class PositionalEncoding {
 public:
  PositionalEncoding() = default;
  PositionalEncoding(std::size_t max_len, std::size_t d) : max_len_(max_len), d_(d), table_(max_len * d) {
    for (std::size_t pos = 0; pos < max_len; ++pos) {
      for (std::size_t i = 0; i < d; ++i) {
        const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
        const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
        table_[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
      }
    }
  }

  std::size_t max_len() const { return max_len_; }

  /// First `n` rows as a constant tensor.
  Tensor rows(std::size_t n) const {
    if (n > max_len_) {
      throw ContractError("sequence of " + std::to_string(n) + " exceeds positional table of " +
                          std::to_string(max_len_));
    }
    return Tensor::from(n, d_, std::vector<double>(table_.begin(), table_.begin() + static_cast<std::ptrdiff_t>(n * d_)));
  }

 private:
  std::size_t max_len_ = 0;
  std::size_t d_ = 0;
  std::vector<double> table_;
};

/// emb[ids] · √d + positional rows.
inline Tensor embed_tokens(const Tensor& embedding, std::span<const std::size_t> ids, const PositionalEncoding& pe) {
  const double s = std::sqrt(static_cast<double>(embedding.cols()));
  return add(scale(gather_rows(embedding, ids), s), pe.rows(ids.size()));
}

struct EncoderLayerParams {
  AttentionLayer self_attn;
  LayerNormParams ln_attn;
  FeedForward ff;
  LayerNormParams ln_ff;

  static EncoderLayerParams init(std::size_t d, std::size_t heads, std::size_t d_ff, Rng& rng) {
    return {AttentionLayer::init(d, heads, rng), LayerNormParams::init(d), FeedForward::init(d, d_ff, rng),
            LayerNormParams::init(d)};
  }
  void collect(const std::string& prefix, ParamList& out) const {
    self_attn.collect(prefix + ".self_attn", out);
    ln_attn.collect(prefix + ".ln_attn", out);
    ff.collect(prefix + ".ff", out);
    ln_ff.collect(prefix + ".ln_ff", out);
  }
};

struct EncoderStack {
  std::vector<EncoderLayerParams> layers;

  static EncoderStack init(std::size_t num_layers, std::size_t d, std::size_t heads, std::size_t d_ff, Rng& rng) {
    EncoderStack s;
    for (std::size_t i = 0; i < num_layers; ++i) s.layers.push_back(EncoderLayerParams::init(d, heads, d_ff, rng));
    return s;
  }
  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

inline Tensor encoder_layer(const EncoderLayerParams& p, const Tensor& x, const Mask* key_mask,
                            const ForwardContext& ctx) {
  const Tensor attended = ctx.drop(multi_head_attention(p.self_attn, x, x, x, key_mask));
  const Tensor h = p.ln_attn(add(attended, x));
  return p.ln_ff(add(ctx.drop(p.ff(h)), h));
}

/// Transformer encoder over one token sequence. Positions holding `pad_id`
/// are never attended to.
inline Tensor encode(const EncoderStack& stack, const Tensor& embedding, std::span<const std::size_t> token_ids,
                     const PositionalEncoding& pe, const ForwardContext& ctx, std::size_t pad_id = 0) {
  if (token_ids.empty()) throw ContractError("encode: empty context");
  std::vector<unsigned char> keep(token_ids.size());
  bool any_pad = false;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    keep[i] = token_ids[i] != pad_id;
    any_pad = any_pad || !keep[i];
  }
  Mask mask;
  if (any_pad) mask = Mask::keys(token_ids.size(), keep);
  Tensor x = ctx.drop(embed_tokens(embedding, token_ids, pe));
  for (const auto& layer : stack.layers) x = encoder_layer(layer, x, any_pad ? &mask : nullptr, ctx);
  return x;
}

/// Self-attention and feed-forward parameters of one decoder layer; the
/// memory sub-layer is supplied by the caller.
struct DecoderLayerParams {
  AttentionLayer self_attn;
  LayerNormParams ln_self;
  FeedForward ff;
  LayerNormParams ln_ff;

  static DecoderLayerParams init(std::size_t d, std::size_t heads, std::size_t d_ff, Rng& rng) {
    return {AttentionLayer::init(d, heads, rng), LayerNormParams::init(d), FeedForward::init(d, d_ff, rng),
            LayerNormParams::init(d)};
  }
  void collect(const std::string& prefix, ParamList& out) const {
    self_attn.collect(prefix + ".self_attn", out);
    ln_self.collect(prefix + ".ln_self", out);
    ff.collect(prefix + ".ff", out);
    ln_ff.collect(prefix + ".ln_ff", out);
  }
};

/// Maps the self-attention output to the memory sub-layer output (residual and norm included).
using MemoryAttend = std::function<Tensor(const Tensor&)>;

inline Tensor decoder_layer(const DecoderLayerParams& p, const Tensor& h_in, const MemoryAttend& memory_attend,
                            const ForwardContext& ctx) {
  const Mask causal = Mask::causal(h_in.rows());
  const Tensor self_out =
      p.ln_self(add(ctx.drop(multi_head_attention(p.self_attn, h_in, h_in, h_in, &causal)), h_in));
  const Tensor cross_out = memory_attend(self_out);
  return p.ln_ff(add(ctx.drop(p.ff(cross_out)), cross_out));
}

/// Plain encoder-decoder cross-attention sub-layer.
struct CrossAttentionParams {
  AttentionLayer attn;
  LayerNormParams ln;

  static CrossAttentionParams init(std::size_t d, std::size_t heads, Rng& rng) {
    return {AttentionLayer::init(d, heads, rng), LayerNormParams::init(d)};
  }
  void collect(const std::string& prefix, ParamList& out) const {
    attn.collect(prefix + ".attn", out);
    ln.collect(prefix + ".ln", out);
  }
};

inline Tensor cross_attention_sublayer(const CrossAttentionParams& p, const Tensor& h_in, const Tensor& memory,
                                       const ForwardContext& ctx) {
  return p.ln(add(ctx.drop(multi_head_attention(p.attn, h_in, memory, memory)), h_in));
}

// ---------------------------------------------------------------------------
// Graph convolution

/// Symmetric {0,1} adjacency with zero diagonal.
struct AdjacencyMatrix {
  std::size_t n = 0;
  std::vector<unsigned char> bits;

  explicit AdjacencyMatrix(std::size_t nodes = 0) : n(nodes), bits(nodes * nodes, 0) {}
  bool at(std::size_t i, std::size_t j) const { return bits[i * n + j] != 0; }
  void connect(std::size_t i, std::size_t j) {
    if (i == j) return;
    bits[i * n + j] = 1;
    bits[j * n + i] = 1;
  }
  std::size_t edge_count() const {
    std::size_t c = 0;
    for (auto b : bits) c += b;
    return c / 2;
  }
  friend bool operator==(const AdjacencyMatrix&, const AdjacencyMatrix&) = default;
};

/// D̂^{-1/2} (A + I) D̂^{-1/2}, stored sparsely.
inline SparseMatrix normalize_adjacency(const AdjacencyMatrix& a) {
  std::vector<double> inv_sqrt_deg(a.n);
  for (std::size_t i = 0; i < a.n; ++i) {
    std::size_t deg = 1;
    for (std::size_t j = 0; j < a.n; ++j) deg += a.at(i, j) ? 1 : 0;
    inv_sqrt_deg[i] = 1.0 / std::sqrt(static_cast<double>(deg));
  }
  SparseMatrix s{a.n, a.n, {}};
  for (std::size_t i = 0; i < a.n; ++i) {
    for (std::size_t j = 0; j < a.n; ++j) {
      if (i == j || a.at(i, j)) s.entries.push_back({i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]});
    }
  }
  return s;
}

enum class Activation { linear, relu, tanh };

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu:
      return relu(x);
    case Activation::tanh:
      return care::tanh(x);
    case Activation::linear:
      break;
  }
  return x;
}

struct GcnLayer {
  Tensor weight;  // d_in × d_out
  Activation activation = Activation::linear;

  static GcnLayer init(std::size_t d_in, std::size_t d_out, Activation act, Rng& rng) {
    return {xavier_uniform(d_in, d_out, rng), act};
  }
  void collect(const std::string& prefix, ParamList& out) const { out.push_back({prefix + ".weight", weight}); }
};

/// σ(Ã H W) with Ã the normalized adjacency.
inline Tensor gcn_forward(const GcnLayer& layer, const Tensor& h, const SparseMatrix& normalized) {
  if (normalized.rows != h.rows()) {
    throw DimensionError("gcn: adjacency covers " + std::to_string(normalized.rows) + " nodes, features have " +
                         std::to_string(h.rows()) + " rows");
  }
  return activate(sparse_matmul(normalized, matmul(h, layer.weight)), layer.activation);
}

inline Tensor gcn_forward(const GcnLayer& layer, const Tensor& h, const AdjacencyMatrix& a) {
  return gcn_forward(layer, h, normalize_adjacency(a));
}

}  // namespace care
