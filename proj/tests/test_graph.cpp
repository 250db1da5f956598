#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "care/graph.hpp"
#include "graph_fixtures.hpp"
#include "support.hpp"

using namespace care;

using test::bowling_example;
using test::ceg_from;
using test::kBowlingCeg;

TEST(CauseEffectGraph, ParseAndLookup) {
  const auto g = ceg_from("A\tB\t1\nb\tc\t2.5\n\na\tb\t3\n");
  EXPECT_EQ(g.edge_count(), 2u);
  EXPECT_EQ(g.weight("a", "b"), 3.0);
  EXPECT_FALSE(g.has_edge("b", "a"));
  EXPECT_EQ(g.link_weight("b", "a"), 3.0);
  EXPECT_EQ(g.successors("b"), (std::vector<std::string>{"c"}));
  EXPECT_EQ(g.neighbors("b"), (std::set<std::string>{"a", "c"}));
}

TEST(CauseEffectGraph, MalformedLines) {
  EXPECT_THROW(ceg_from("a\tb\n"), ParseError);
  EXPECT_THROW(ceg_from("a\tb\tx\n"), ParseError);
  EXPECT_THROW(ceg_from("a\t\t1\n"), ParseError);
  EXPECT_THROW(ceg_from("a\tb\t0\n"), ValidationError);
  EXPECT_THROW(ceg_from("a\tb\t-1\n"), ValidationError);
  try {
    ceg_from("a\tb\t1\n\nbad line\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

class GraphFixtureTest : public ::testing::TestWithParam<test::GraphFixture> {};

TEST_P(GraphFixtureTest, MatchesHandTrace) {
  const auto& f = GetParam();
  EXPECT_EQ(describe(f.build()), f.expected);
}

INSTANTIATE_TEST_SUITE_P(HandTraced, GraphFixtureTest, ::testing::ValuesIn(test::graph_fixtures()),
                         [](const auto& info) { return info.param.name; });

TEST(GraphFixture, BowlingCandidatesEqualPosterior) {
  const auto g = build_causal_graph(bowling_example(), ceg_from(kBowlingCeg), Stopwords());
  EXPECT_EQ(g.candidates, g.posterior_edges);
}

TEST(GraphFixture, AcceptFilterSkipsNeighbors) {
  const auto ceg = ceg_from("rain\tflood\t1\nrain\tumbrella\t2\ncloud\train\t2\nrain\twet\t2\n");
  const auto ex = make_example({"Rain again"}, "sad", "oh no", std::string("Take an umbrella, it is wet"));
  const WordFilter no_umbrella = [](const std::string& w) { return w != "umbrella"; };
  EXPECT_EQ(describe(build_causal_graph(ex, ceg, Stopwords(), {5}, no_umbrella)),
            "nodes: sad(emotion) rain(context) cloud(neighbor) wet(neighbor) flood(neighbor)\n"
            "prior:\n"
            "posterior: rain->wet");
}

TEST(GraphFixture, DuplicateEdgesKeepMaxWeight) {
  const auto ceg = ceg_from("joyful\tjoyful\t1\nday\tjoyful\t1\nday\tjoyful\t4\n");
  EXPECT_EQ(ceg.weight("day", "joyful"), 4.0);
  const auto g = build_causal_graph(make_example({"Joyful joyful day"}, "joyful", "nice"), ceg, Stopwords());
  EXPECT_EQ(g.a_prior.edge_count(), 1u);
}

TEST(Graph, EmotionWordSkipsStopwords) {
  const Stopwords sw;
  EXPECT_EQ(emotion_word("impressed", sw), "impressed");
  EXPECT_EQ(emotion_word("Very Proud", sw), "proud");
  EXPECT_THROW(emotion_word("", sw), ContractError);
}

TEST(Graph, AdjacencyRejectsOutOfRangeEdges) {
  EXPECT_THROW(adjacency(2, {{0, 2}}), IndexError);
  const auto a = adjacency(3, {{0, 1}, {1, 0}, {2, 1}});
  EXPECT_EQ(a.edge_count(), 2u);
}

TEST(GraphInvariants, ToyCorpusPriorWithinPosterior) {
  const auto corpus = load_corpus((test::source_dir() / "data/toy/corpus.jsonl").string());
  const auto ceg = load_ceg((test::source_dir() / "data/toy/ceg.tsv").string());
  const auto sw = Stopwords::load((test::source_dir() / "data/stopwords.txt").string());
  for (const auto& ex : corpus) {
    const auto g = build_causal_graph(ex, ceg, sw, {64});
    EXPECT_LE(g.nodes.size(), 64u);
    EXPECT_EQ(g.nodes.origin(0), NodeOrigin::emotion);
    EXPECT_TRUE(std::includes(g.posterior_edges.begin(), g.posterior_edges.end(), g.prior_edges.begin(),
                              g.prior_edges.end()));
    EXPECT_TRUE(std::includes(g.candidates.begin(), g.candidates.end(), g.posterior_edges.begin(),
                              g.posterior_edges.end()));
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      EXPECT_FALSE(g.a_post.at(i, i));
      for (std::size_t j = 0; j < g.nodes.size(); ++j) {
        EXPECT_EQ(g.a_prior.at(i, j), g.a_prior.at(j, i));
        if (g.a_prior.at(i, j)) {
          EXPECT_TRUE(g.a_post.at(i, j));
        }
      }
    }
  }
}

TEST(GraphInvariants, DeterministicConstruction) {
  const auto ceg = load_ceg((test::source_dir() / "data/toy/ceg.tsv").string());
  const auto ex = bowling_example();
  EXPECT_EQ(describe(build_causal_graph(ex, ceg, Stopwords())), describe(build_causal_graph(ex, ceg, Stopwords())));
}
