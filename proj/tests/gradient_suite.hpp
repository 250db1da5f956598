#pragma once

// Finite-difference checks of every differentiable kernel and composite
// layer. Shared by the unit tests and the acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "care/cvgae.hpp"
#include "care/grad_check.hpp"
#include "care/layers.hpp"
#include "care/model.hpp"
#include "care/ops.hpp"
#include "support.hpp"

namespace care::test {

struct GradCase {
  std::string name;
  std::function<GradCheckResult()> run;
};

inline GradCheckResult check(std::function<Tensor()> f, std::vector<Tensor> inputs) {
  return grad_check(f, inputs);
}

inline std::vector<GradCase> kernel_grad_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult()> fn) { cases.push_back({std::move(name), std::move(fn)}); };

  add_case("matmul", [] {
    Rng r(1);
    Tensor a = random_tensor(3, 4, r), b = random_tensor(4, 5, r);
    return check([=] { return probe(matmul(a, b)); }, {a, b});
  });
  add_case("matmul_nt", [] {
    Rng r(2);
    Tensor a = random_tensor(3, 4, r), b = random_tensor(5, 4, r);
    return check([=] { return probe(matmul_nt(a, b)); }, {a, b});
  });
  add_case("gram", [] {
    Rng r(21);
    Tensor z = random_tensor(5, 3, r);
    return check([=] { return probe(gram(z)); }, {z});
  });
  add_case("transpose", [] {
    Rng r(3);
    Tensor a = random_tensor(3, 4, r);
    return check([=] { return probe(transpose(a)); }, {a});
  });
  add_case("sparse_matmul", [] {
    Rng r(4);
    Tensor x = random_tensor(4, 3, r);
    SparseMatrix s{4, 4, {{0, 0, 0.5}, {0, 2, 0.25}, {1, 1, 1.0}, {2, 0, 0.25}, {3, 3, -0.7}, {3, 1, 0.3}}};
    return check([=] { return probe(sparse_matmul(s, x)); }, {x});
  });
  add_case("add", [] {
    Rng r(5);
    Tensor a = random_tensor(2, 3, r), b = random_tensor(2, 3, r);
    return check([=] { return probe(add(a, b)); }, {a, b});
  });
  add_case("sub", [] {
    Rng r(6);
    Tensor a = random_tensor(2, 3, r), b = random_tensor(2, 3, r);
    return check([=] { return probe(sub(a, b)); }, {a, b});
  });
  add_case("mul", [] {
    Rng r(7);
    Tensor a = random_tensor(2, 3, r), b = random_tensor(2, 3, r);
    return check([=] { return probe(mul(a, b)); }, {a, b});
  });
  add_case("scale", [] {
    Rng r(8);
    Tensor a = random_tensor(2, 3, r);
    return check([=] { return probe(scale(a, -1.7)); }, {a});
  });
  add_case("add_row", [] {
    Rng r(9);
    Tensor a = random_tensor(3, 4, r), row = random_tensor(1, 4, r);
    return check([=] { return probe(add_row(a, row)); }, {a, row});
  });
  add_case("relu", [] {
    Rng r(10);
    Tensor a = away_from_zero(3, 4, r);
    return check([=] { return probe(relu(a)); }, {a});
  });
  add_case("sigmoid", [] {
    Rng r(11);
    Tensor a = random_tensor(3, 4, r);
    return check([=] { return probe(sigmoid(a)); }, {a});
  });
  add_case("tanh", [] {
    Rng r(12);
    Tensor a = random_tensor(3, 4, r);
    return check([=] { return probe(care::tanh(a)); }, {a});
  });
  add_case("exp", [] {
    Rng r(13);
    Tensor a = random_tensor(3, 4, r);
    return check([=] { return probe(care::exp(a)); }, {a});
  });
  add_case("clamp", [] {
    Rng r(14);
    Tensor a = Tensor::matrix({{-3.0, -0.5, 0.2}, {0.9, 2.5, -1.4}}, true);
    return check([=] { return probe(clamp(a, -2.0, 2.0)); }, {a});
  });
  add_case("dropout", [] {
    Rng r(15);
    Tensor a = random_tensor(4, 5, r);
    return check([=] {
      Rng noise(77);
      return probe(dropout(a, 0.3, noise));
    }, {a});
  });
  add_case("sum", [] {
    Rng r(16);
    Tensor a = random_tensor(3, 4, r);
    return check([=] { return sum(mul(a, a)); }, {a});
  });
  add_case("mean", [] {
    Rng r(17);
    Tensor a = random_tensor(3, 4, r);
    return check([=] { return mean(mul(a, a)); }, {a});
  });
  add_case("softmax_cols", [] {
    Rng r(18);
    Tensor a = random_tensor(3, 5, r);
    return check([=] { return probe(softmax(a, Axis::cols)); }, {a});
  });
  add_case("softmax_rows", [] {
    Rng r(19);
    Tensor a = random_tensor(4, 3, r);
    return check([=] { return probe(softmax(a, Axis::rows)); }, {a});
  });
  add_case("softmax_masked", [] {
    Rng r(20);
    Tensor a = random_tensor(4, 4, r);
    const Mask m = Mask::causal(4);
    return check([=] { return probe(softmax(a, Axis::cols, &m)); }, {a});
  });
  add_case("layer_norm", [] {
    Rng r(21);
    Tensor x = random_tensor(3, 5, r), g = random_tensor(1, 5, r), b = random_tensor(1, 5, r);
    return check([=] { return probe(layer_norm(x, g, b)); }, {x, g, b});
  });
  add_case("gather_rows", [] {
    Rng r(22);
    Tensor t = random_tensor(5, 3, r);
    return check([=] { return probe(gather_rows(t, {4, 1, 4, 0})); }, {t});
  });
  add_case("concat_rows", [] {
    Rng r(23);
    Tensor a = random_tensor(2, 3, r), b = random_tensor(1, 3, r);
    return check([=] { return probe(concat_rows({a, b, a})); }, {a, b});
  });
  add_case("concat_cols", [] {
    Rng r(24);
    Tensor a = random_tensor(3, 2, r), b = random_tensor(3, 4, r);
    return check([=] { return probe(concat_cols({a, b})); }, {a, b});
  });
  add_case("slice_cols", [] {
    Rng r(25);
    Tensor a = random_tensor(3, 6, r);
    return check([=] { return probe(slice_cols(a, 2, 3)); }, {a});
  });
  add_case("slice_rows", [] {
    Rng r(26);
    Tensor a = random_tensor(6, 3, r);
    return check([=] { return probe(slice_rows(a, 1, 4)); }, {a});
  });
  add_case("pair_dot", [] {
    Rng r(27);
    Tensor z = random_tensor(5, 3, r);
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {2, 2}, {4, 0}, {1, 0}};
    return check([=] { return probe(pair_dot(z, pairs)); }, {z});
  });
  add_case("gaussian_reparam_sample", [] {
    Rng r(28);
    Tensor mu = random_tensor(3, 4, r), ls = random_tensor(3, 4, r, true, 0.5);
    return check([=] {
      Rng noise(5);
      return probe(gaussian_reparam_sample(mu, ls, noise));
    }, {mu, ls});
  });
  add_case("kl_diag_gaussians", [] {
    Rng r(29);
    Tensor mq = random_tensor(3, 4, r), lq = random_tensor(3, 4, r, true, 0.5);
    Tensor mp = random_tensor(3, 4, r), lp = random_tensor(3, 4, r, true, 0.5);
    return check([=] { return kl_diag_gaussians(mq, lq, mp, lp); }, {mq, lq, mp, lp});
  });
  add_case("weighted_bce_logits", [] {
    Rng r(30);
    Tensor x = random_tensor(6, 1, r);
    const std::vector<double> t{1, 0, 0, 1, 0, 0};
    return check([=] { return weighted_bce_logits(x, t, 2.0); }, {x});
  });
  add_case("cross_entropy", [] {
    Rng r(31);
    Tensor x = random_tensor(4, 7, r);
    const std::vector<std::size_t> t{3, 0, 6, 3};
    return check([=] { return cross_entropy(x, t); }, {x});
  });
  return cases;
}

inline std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

inline std::vector<GradCase> layer_grad_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult()> fn) { cases.push_back({std::move(name), std::move(fn)}); };
  constexpr std::size_t d = 6;

  add_case("linear", [] {
    Rng r(40);
    Linear l = Linear::init(d, 4, r);
    Tensor x = random_tensor(3, d, r);
    ParamList ps;
    l.collect("l", ps);
    auto in = tensors_of(ps);
    in.push_back(x);
    return check([=] { return probe(l(x)); }, in);
  });
  add_case("layer_norm_params", [] {
    Rng r(41);
    LayerNormParams ln = LayerNormParams::init(d);
    ln.gain = random_tensor(1, d, r);
    ln.bias = random_tensor(1, d, r);
    Tensor x = random_tensor(3, d, r);
    return check([=] { return probe(ln(x)); }, {ln.gain, ln.bias, x});
  });
  add_case("feed_forward", [] {
    Rng r(42);
    FeedForward ff = FeedForward::init(d, 8, r);
    Tensor x = random_tensor(3, d, r);
    ParamList ps;
    ff.collect("ff", ps);
    auto in = tensors_of(ps);
    in.push_back(x);
    return check([=] { return probe(ff(x)); }, in);
  });
  add_case("multi_head_attention", [] {
    Rng r(43);
    AttentionLayer a = AttentionLayer::init(d, 2, r);
    Tensor q = random_tensor(3, d, r), kv = random_tensor(5, d, r);
    ParamList ps;
    a.collect("a", ps);
    auto in = tensors_of(ps);
    in.push_back(q);
    in.push_back(kv);
    return check([=] { return probe(multi_head_attention(a, q, kv, kv)); }, in);
  });
  add_case("multi_head_attention_masked", [] {
    Rng r(44);
    AttentionLayer a = AttentionLayer::init(d, 3, r);
    Tensor x = random_tensor(4, d, r);
    const Mask m = Mask::causal(4);
    ParamList ps;
    a.collect("a", ps);
    auto in = tensors_of(ps);
    in.push_back(x);
    return check([=] { return probe(multi_head_attention(a, x, x, x, &m)); }, in);
  });
  add_case("encoder_stack", [] {
    Rng r(45);
    EncoderStack enc = EncoderStack::init(2, d, 2, 8, r);
    Tensor emb = random_tensor(10, d, r, true, 0.3);
    const PositionalEncoding pe(16, d);
    const std::vector<std::size_t> ids{6, 4, 7, 0, 9};
    ParamList ps;
    enc.collect("enc", ps);
    auto in = tensors_of(ps);
    in.push_back(emb);
    return check([=] { return probe(encode(enc, emb, ids, pe, {})); }, in);
  });
  add_case("decoder_layer_cross_attention", [] {
    Rng r(46);
    DecoderLayerParams dec = DecoderLayerParams::init(d, 2, 8, r);
    CrossAttentionParams cross = CrossAttentionParams::init(d, 2, r);
    Tensor h = random_tensor(4, d, r), mem = random_tensor(3, d, r);
    ParamList ps;
    dec.collect("dec", ps);
    cross.collect("cross", ps);
    auto in = tensors_of(ps);
    in.push_back(h);
    in.push_back(mem);
    return check([=] {
      return probe(decoder_layer(dec, h, [&](const Tensor& x) { return cross_attention_sublayer(cross, x, mem, {}); }, {}));
    }, in);
  });
  add_case("gcn_layer", [] {
    Rng r(47);
    AdjacencyMatrix a(5);
    a.connect(0, 1);
    a.connect(1, 2);
    a.connect(3, 4);
    a.connect(0, 4);
    GcnLayer l = GcnLayer::init(d, 4, Activation::tanh, r);
    Tensor h = random_tensor(5, d, r);
    return check([=] { return probe(gcn_forward(l, h, a)); }, {l.weight, h});
  });
  add_case("gcn_layer_relu", [] {
    Rng r(48);
    AdjacencyMatrix a(4);
    a.connect(0, 1);
    a.connect(2, 3);
    GcnLayer l = GcnLayer::init(d, 3, Activation::relu, r);
    Tensor h = random_tensor(4, d, r);
    return check([=] { return probe(gcn_forward(l, h, a)); }, {l.weight, h});
  });
  add_case("multi_source_cross", [] {
    Rng r(49);
    MultiSourceCrossParams p = MultiSourceCrossParams::init(d, 2, r);
    Tensor h = random_tensor(3, d, r), e = random_tensor(4, d, r), rel = random_tensor(2, d, r);
    ParamList ps;
    p.collect("m", ps);
    auto in = tensors_of(ps);
    in.push_back(h);
    in.push_back(e);
    in.push_back(rel);
    return check([=] { return probe(multi_source_cross(p, h, e, rel)); }, in);
  });
  add_case("graph_latents_conditioned", [] {
    Rng r(50);
    GraphLatentNet net = GraphLatentNet::init(d, d, d, 2, r);
    AdjacencyMatrix a(4);
    a.connect(0, 1);
    a.connect(1, 3);
    const SparseMatrix norm = normalize_adjacency(a);
    Tensor v = random_tensor(4, d, r), cond = random_tensor(3, d, r);
    ParamList ps;
    net.collect("g", ps);
    auto in = tensors_of(ps);
    in.push_back(v);
    in.push_back(cond);
    return check([=] {
      Rng noise(3);
      const GraphLatents g = graph_latents(net, v, norm, &cond, &noise);
      return add(probe(g.z), kl_diag_gaussians(g.params.mu, g.params.log_sigma, Tensor::zeros(4, d), Tensor::zeros(4, d)));
    }, in);
  });
  add_case("context_latent_net", [] {
    Rng r(51);
    ContextLatentNet net = ContextLatentNet::init(d, r);
    Tensor c = random_tensor(1, d, r);
    ParamList ps;
    net.collect("c", ps);
    auto in = tensors_of(ps);
    in.push_back(c);
    return check([=] {
      const GaussianParams g = net(c);
      return add(probe(g.mu), probe(g.log_sigma, 5));
    }, in);
  });
  return cases;
}

/// Micro example: |C| = 6 context tokens, |V| = 8 nodes, k = 3, |R| = 4 decoder
/// positions, vocabulary of 20.
struct MicroFixture {
  CareModel model;
  PreparedExample example;
};

inline MicroFixture micro_fixture(std::uint64_t seed = 11, bool no_reasoning = false, bool no_condition = false) {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.d_model = 4;
  cfg.num_heads = 2;
  cfg.d_ff = 6;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.dropout = 0.0;
  cfg.max_nodes = 8;
  cfg.top_k = 3;
  cfg.max_context = 12;
  cfg.max_response = 8;
  cfg.num_emotions = 4;
  cfg.no_reasoning = no_reasoning;
  cfg.no_condition = no_condition;
  Rng rng(seed);
  MicroFixture f{CareModel::init(cfg, rng), PreparedExample()};
  auto& ex = f.example;
  ex.context_ids = {SpecialTokens::cls, SpecialTokens::usr, 8, 9, 10, 11};
  ex.response_ids = {12, 13, 14};
  ex.recognition_ids = ex.context_ids;
  ex.recognition_ids.push_back(SpecialTokens::sys);
  ex.recognition_ids.insert(ex.recognition_ids.end(), ex.response_ids.begin(), ex.response_ids.end());
  ex.emotion = 2;
  const char* words[] = {"e", "a", "b", "c", "d", "f", "g", "h"};
  for (std::size_t i = 0; i < 8; ++i) ex.graph.nodes.push(words[i], i == 0 ? NodeOrigin::emotion : NodeOrigin::context);
  ex.node_ids = {7, 8, 9, 10, 11, 15, 16, 17};
  ex.graph.candidates = {{0, 1}, {1, 2}, {2, 0}, {3, 4}, {4, 5}, {5, 6}, {6, 7}, {7, 3}};
  ex.graph.prior_edges = {{0, 1}, {1, 2}};
  ex.graph.posterior_edges = {{0, 1}, {1, 2}, {3, 4}, {6, 7}};
  ex.graph.a_prior = adjacency(8, ex.graph.prior_edges);
  ex.graph.a_post = adjacency(8, ex.graph.posterior_edges);
  ex.a_prior_norm = normalize_adjacency(ex.graph.a_prior);
  ex.a_post_norm = normalize_adjacency(ex.graph.a_post);
  return f;
}

/// End-to-end gradient of forward_train's total loss over every parameter.
inline GradCheckResult forward_train_grad_check(std::uint64_t seed = 11) {
  MicroFixture f = micro_fixture(seed);
  const ParamList params = f.model.parameters();
  auto in = tensors_of(params);
  const auto& model = f.model;
  const auto& ex = f.example;
  return check([&] {
    Rng rng(123);
    return forward_train(model, ex, rng).total;
  }, in);
}

}  // namespace care::test
