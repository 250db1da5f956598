#include <gtest/gtest.h>

#include <bit>
#include <set>

#include "care/cvgae.hpp"
#include "support.hpp"

using namespace care;
using care::test::random_tensor;

namespace {

CausalGraph small_graph() {
  CausalGraph g;
  for (const char* w : {"sad", "rain", "cloud", "wet", "flood", "cold"}) g.nodes.push(w, NodeOrigin::context);
  g.candidates = {{1, 3}, {1, 4}, {2, 1}, {5, 0}};
  g.prior_edges = {{1, 3}};
  g.posterior_edges = {{1, 3}, {2, 1}};
  g.a_prior = adjacency(6, g.prior_edges);
  g.a_post = adjacency(6, g.posterior_edges);
  return g;
}

}  // namespace

TEST(Reconstruction, ZeroLatentGivesExactlyOneHalf) {
  const Tensor a = reconstruct_adjacency(Tensor::zeros(7, 5));
  for (double p : a.data()) EXPECT_EQ(p, 0.5);
  const auto probs = edge_probabilities(Tensor::zeros(7, 5), {{0, 1}, {6, 2}});
  for (double p : probs) EXPECT_EQ(p, 0.5);
}

TEST(Reconstruction, SymmetricToTheBit) {
  Rng r(3);
  for (std::size_t n : {2u, 9u, 33u, 64u}) {
    const Tensor a = reconstruct_adjacency(random_tensor(n, 24, r, false, 3.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) ASSERT_EQ(std::bit_cast<std::uint64_t>(a.at(i, j)), std::bit_cast<std::uint64_t>(a.at(j, i)));
  }
}

TEST(Reconstruction, PairProbabilitiesMatchFullMatrix) {
  Rng r(4);
  const Tensor z = random_tensor(5, 3, r, false);
  const Tensor a = reconstruct_adjacency(z);
  const std::vector<DirectedEdge> pairs{{0, 4}, {3, 1}, {2, 2}};
  const auto p = edge_probabilities(z, pairs);
  for (std::size_t k = 0; k < pairs.size(); ++k) EXPECT_NEAR(p[k], a.at(pairs[k].head, pairs[k].tail), 1e-15);
  EXPECT_THROW(edge_probabilities(z, {{0, 5}}), IndexError);
}

TEST(TopK, OrdersByProbabilityThenIndex) {
  const std::vector<DirectedEdge> cands{{2, 0}, {0, 3}, {0, 1}, {1, 0}, {3, 2}};
  const std::vector<double> probs{0.7, 0.5, 0.7, 0.9, 0.5};
  const auto ranked = rank_relations(probs, cands, 4);
  ASSERT_EQ(ranked.size(), 4u);
  const std::vector<std::pair<std::size_t, std::size_t>> expect{{1, 0}, {0, 1}, {2, 0}, {0, 3}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ranked[i].head, expect[i].first);
    EXPECT_EQ(ranked[i].tail, expect[i].second);
  }
  EXPECT_EQ(rank_relations(probs, cands, 100).size(), 5u);
  EXPECT_TRUE(rank_relations(probs, cands, 0).empty());
  EXPECT_THROW(rank_relations(std::vector<double>{0.1}, cands, 2), DimensionError);
}

TEST(TopK, RelationRowsSumEndpointEmbeddings) {
  Rng r(5);
  const Tensor emb = random_tensor(4, 3, r, false);
  const std::vector<DirectedEdge> cands{{0, 2}, {3, 1}};
  const auto sel = select_top_k(std::vector<double>{0.2, 0.8}, cands, 2, emb);
  ASSERT_EQ(sel.matrix.rows(), 2u);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(sel.matrix.at(0, c), emb.at(3, c) + emb.at(1, c));
    EXPECT_EQ(sel.matrix.at(1, c), emb.at(0, c) + emb.at(2, c));
  }
  EXPECT_FALSE(select_top_k(std::vector<double>{}, {}, 3, emb).matrix.defined());
}

TEST(TopK, FullMatrixAndPairPathsAgree) {
  Rng r(6);
  const Tensor z = random_tensor(6, 4, r, false);
  const Tensor emb = random_tensor(6, 4, r, false);
  const auto g = small_graph();
  const auto a = select_top_k(reconstruct_adjacency(z), g.candidates, 3, emb);
  const auto b = select_top_k(edge_probabilities(z, g.candidates), g.candidates, 3, emb);
  ASSERT_EQ(a.relations.size(), b.relations.size());
  for (std::size_t i = 0; i < a.relations.size(); ++i) {
    EXPECT_EQ(a.relations[i].head, b.relations[i].head);
    EXPECT_EQ(a.relations[i].tail, b.relations[i].tail);
    EXPECT_NEAR(a.relations[i].probability, b.relations[i].probability, 1e-15);
  }
}

TEST(ReconTargets, SampledModeLabelsCandidatesAndDrawsNegatives) {
  const auto g = small_graph();
  Rng rng(8);
  const auto rt = make_recon_targets(g, ReconMode::sampled, rng);
  ASSERT_GE(rt.pairs.size(), g.candidates.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < g.candidates.size(); ++i) {
    EXPECT_EQ(rt.pairs[i], std::make_pair(g.candidates[i].head, g.candidates[i].tail));
    EXPECT_EQ(rt.targets[i], g.a_post.at(g.candidates[i].head, g.candidates[i].tail) ? 1.0 : 0.0);
    pos += rt.targets[i] == 1.0;
  }
  EXPECT_EQ(pos, 2u);
  EXPECT_EQ(rt.pairs.size(), g.candidates.size() + pos);
  std::set<std::pair<std::size_t, std::size_t>> ceg;
  for (const auto& c : g.candidates) {
    ceg.emplace(c.head, c.tail);
    ceg.emplace(c.tail, c.head);
  }
  std::set<std::pair<std::size_t, std::size_t>> negs;
  for (std::size_t i = g.candidates.size(); i < rt.pairs.size(); ++i) {
    EXPECT_EQ(rt.targets[i], 0.0);
    EXPECT_NE(rt.pairs[i].first, rt.pairs[i].second);
    EXPECT_EQ(ceg.count(rt.pairs[i]), 0u);
    negs.insert(rt.pairs[i]);
  }
  EXPECT_EQ(negs.size(), pos);
  EXPECT_DOUBLE_EQ(rt.pos_weight, static_cast<double>(rt.pairs.size() - pos) / static_cast<double>(pos));
}

TEST(ReconTargets, FullModeIncludesSelfLoops) {
  const auto g = small_graph();
  Rng rng(8);
  const auto rt = make_recon_targets(g, ReconMode::full, rng);
  ASSERT_EQ(rt.pairs.size(), 36u);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < 36; ++k) {
    const auto [i, j] = rt.pairs[k];
    EXPECT_EQ(rt.targets[k], (i == j || g.a_post.at(i, j)) ? 1.0 : 0.0);
    pos += rt.targets[k] == 1.0;
  }
  EXPECT_EQ(pos, 6u + 4u);
  EXPECT_DOUBLE_EQ(rt.pos_weight, 26.0 / 10.0);
}

TEST(ReconTargets, EmptyGraphGivesZeroLoss) {
  CausalGraph g;
  g.nodes.push("calm", NodeOrigin::emotion);
  g.a_prior = AdjacencyMatrix(1);
  g.a_post = AdjacencyMatrix(1);
  Rng rng(1);
  const auto rt = make_recon_targets(g, ReconMode::sampled, rng);
  EXPECT_TRUE(rt.pairs.empty());
  EXPECT_EQ(reconstruction_loss(Tensor::zeros(1, 3), rt).item(), 0.0);
}

TEST(ReconTargets, SeededAndReproducible) {
  const auto g = small_graph();
  Rng a(21), b(21);
  EXPECT_EQ(make_recon_targets(g, ReconMode::sampled, a).pairs, make_recon_targets(g, ReconMode::sampled, b).pairs);
}

TEST(GraphLatents, UnconditionedMatchesGcnComposition) {
  Rng r(10);
  const auto net = GraphLatentNet::init(4, 4, 4, 2, r);
  const auto g = small_graph();
  const SparseMatrix s = normalize_adjacency(g.a_prior);
  const Tensor v = random_tensor(6, 4, r, false);
  const auto out = graph_latents(net, v, s, nullptr, nullptr);
  const Tensor h = gcn_forward(net.hidden, v, s);
  const Tensor mu = gcn_forward(net.mu, h, s);
  for (std::size_t i = 0; i < mu.size(); ++i) EXPECT_EQ(out.params.mu.data()[i], mu.data()[i]);
  EXPECT_TRUE(out.z.same_node(out.params.mu));
  EXPECT_THROW(graph_latents(net, random_tensor(5, 4, r, false), s, nullptr, nullptr), DimensionError);
}

TEST(GraphLatents, ConditionRowsChangeLatents) {
  Rng r(11);
  const auto net = GraphLatentNet::init(4, 4, 4, 2, r);
  const SparseMatrix s = normalize_adjacency(small_graph().a_post);
  const Tensor v = random_tensor(6, 4, r, false);
  const Tensor c1 = random_tensor(3, 4, r, false), c2 = random_tensor(3, 4, r, false);
  const auto a = graph_latents(net, v, s, &c1, nullptr);
  const auto b = graph_latents(net, v, s, &c2, nullptr);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.z.size(); ++i) diff += std::abs(a.z.data()[i] - b.z.data()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(GraphLatents, LogSigmaClamped) {
  Rng r(12);
  auto net = GraphLatentNet::init(3, 3, 3, 1, r);
  for (double& w : net.log_sigma.weight.mutable_data()) w = 500.0;
  const auto out = graph_latents(net, Tensor::full(4, 3, 1.0), normalize_adjacency(AdjacencyMatrix(4)), nullptr, nullptr);
  for (double v : out.params.log_sigma.data()) EXPECT_LE(v, kLogSigmaMax);
}

TEST(Kl, IdenticalRecognitionAndPriorGiveZero) {
  Rng r(13);
  const auto net = GraphLatentNet::init(4, 4, 4, 2, r);
  const SparseMatrix s = normalize_adjacency(small_graph().a_post);
  const Tensor v = random_tensor(6, 4, r, false);
  const auto a = graph_latents(net, v, s, nullptr, nullptr);
  const auto b = graph_latents(net, v, s, nullptr, nullptr);
  EXPECT_EQ(kl(a.params, b.params).item(), 0.0);
  const auto ctx = ContextLatentNet::init(4, r);
  const Tensor x = random_tensor(1, 4, r, false);
  EXPECT_EQ(kl(ctx(x), ctx(x)).item(), 0.0);
}

TEST(Conditions, EmotionAndContextRows) {
  Rng r(14);
  const auto nets = CvgaeNets::init(4, 2, 5, r);
  EXPECT_EQ(emotion_condition(nets, 4).shape(), (Shape{1, 4}));
  EXPECT_THROW(emotion_condition(nets, 5), LabelError);
  const Tensor enc = random_tensor(7, 4, r, false);
  EXPECT_EQ(context_condition(nets, enc).shape(), (Shape{1, 4}));
  const auto b = make_conditions(context_condition(nets, enc), emotion_condition(nets, 1), Tensor::zeros(1, 4));
  EXPECT_EQ(b.c_cond.shape(), (Shape{3, 4}));
  EXPECT_EQ(b.c_cond.at(1, 2), nets.emotion_table.at(1, 2));
  const auto q = context_recognition(nets, enc);
  EXPECT_EQ(q.mu.shape(), (Shape{1, 4}));
}
