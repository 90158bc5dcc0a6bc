#include "va3/aggregator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "grad_util.hpp"
#include "test_util.hpp"

namespace va3 {
namespace {

using ad::Var;
using testing::make_node;
using testing::random_tensor;

using Matrix = std::vector<std::vector<double>>;

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

// row x [in] times w [in, out].
std::vector<double> times(const std::vector<double>& x, const Tensor& w) {
  std::vector<double> out(w.dim(1), 0.0);
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    for (std::size_t o = 0; o < w.dim(1); ++o) out[o] += x[i] * w.at(i, o);
  }
  return out;
}

// Dense reference for one GAT layer: scores for every (i, j), masked to
// -inf outside the neighbourhood, softmax per row.
Matrix dense_layer(const Matrix& f, const std::vector<std::vector<bool>>& adjacent,
                   const GatLayer& layer, Matrix* alpha_out) {
  const std::size_t n = f.size();
  Matrix alpha(n, std::vector<double>(n, 0.0));
  Matrix projected(n);
  for (std::size_t j = 0; j < n; ++j) projected[j] = times(f[j], layer.w_g.value());
  Matrix out(n, std::vector<double>(f[0].size(), 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n, -std::numeric_limits<double>::infinity());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!adjacent[i][j]) continue;
      std::vector<double> joined = f[i];
      joined.insert(joined.end(), f[j].begin(), f[j].end());
      std::vector<double> hidden = times(joined, layer.w_s.value());
      double score = 0.0;
      for (std::size_t k = 0; k < hidden.size(); ++k) {
        const double x = hidden[k] > 0 ? hidden[k] : 0.01 * hidden[k];
        score += x * layer.a.value().at(k, 0);
      }
      s[j] = score;
      mx = std::max(mx, score);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(s[j] - mx);
    for (std::size_t j = 0; j < n; ++j) {
      alpha[i][j] = std::exp(s[j] - mx) / z;
      for (std::size_t c = 0; c < out[i].size(); ++c) out[i][c] += alpha[i][j] * projected[j][c];
    }
    for (double& x : out[i]) x = std::max(x, 0.0);
  }
  if (alpha_out) *alpha_out = alpha;
  return out;
}

Qdg chain_graph() {
  return Qdg::build("g", "v", {"and"},
                    {make_node("m", QuestionRole::kMain), make_node("s", QuestionRole::kLeaf)},
                    {{"m", "s", "and"}});
}

Qdg single_node(const std::string& id) {
  return Qdg::build(id, "v", {}, {make_node(id, QuestionRole::kMain)}, {});
}

TEST(GatTest, SelfLoopOnlyNodeKeepsItsOwnFeature) {
  ParamStore params(1);
  const auto agg = AggregatorParams::create(params, "ag", {4, 1, 3, 1.0});
  const Qdg g = single_node("q");
  const Qdg* graphs[] = {&g};
  const GraphBatch batch = GraphBatch::build(graphs);
  Rng rng(2);
  const Tensor f = random_tensor(rng, {1, 4});
  std::vector<Var> attention;
  const auto layers = gat_forward(batch, Var::constant(f), agg, &attention);
  EXPECT_EQ(attention[0].item(), 1.0);
  const std::vector<double> expected = times(to_matrix(f)[0], agg.layers[0].w_g.value());
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(layers[0].value().at(0, c), std::max(expected[c], 0.0), 1e-15);
  }
}

TEST(GatTest, IdenticalNeighboursShareAttention) {
  ParamStore params(3);
  const auto agg = AggregatorParams::create(params, "ag", {4, 2, 3, 1.0});
  const Qdg g = chain_graph();
  const Qdg* graphs[] = {&g};
  const GraphBatch batch = GraphBatch::build(graphs);
  Tensor f(Shape{2, 4});
  for (std::size_t c = 0; c < 4; ++c) f.at(0, c) = f.at(1, c) = 0.25 * static_cast<double>(c) - 0.3;
  std::vector<Var> attention;
  gat_forward(batch, Var::constant(f), agg, &attention);
  // Pairs: (m, m), (m, s), (s, s). Layer 2 inputs also coincide row-wise.
  for (const auto& a : attention) {
    EXPECT_EQ(a.value()[0], 0.5);
    EXPECT_EQ(a.value()[1], 0.5);
    EXPECT_EQ(a.value()[2], 1.0);
  }
}

TEST(GatTest, MatchesDenseMaskedReference) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 10);
    const Qdg g = testing::random_dag(rng, 6);
    ParamStore params(seed);
    const auto agg = AggregatorParams::create(params, "ag", {5, 2, 4, 1.0});
    const Qdg* graphs[] = {&g};
    const GraphBatch batch = GraphBatch::build(graphs);
    const Tensor f = random_tensor(rng, {6, 5});
    std::vector<std::vector<bool>> adjacent(6, std::vector<bool>(6, false));
    for (std::size_t i = 0; i < 6; ++i) {
      adjacent[i][i] = true;
      for (std::size_t j : g.children(i)) adjacent[i][j] = true;
    }
    std::vector<Var> attention;
    const auto layers = gat_forward(batch, Var::constant(f), agg, &attention);
    Matrix cur = to_matrix(f);
    for (std::size_t k = 0; k < 2; ++k) {
      Matrix alpha;
      cur = dense_layer(cur, adjacent, agg.layers[k], &alpha);
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 5; ++c) {
          EXPECT_NEAR(layers[k].value().at(i, c), cur[i][c], 1e-12);
        }
      }
      for (std::size_t p = 0; p < batch.pair_source.size(); ++p) {
        EXPECT_NEAR(attention[k].value()[p], alpha[batch.pair_source[p]][batch.pair_target[p]],
                    1e-12);
      }
    }
  }
}

TEST(GatTest, AttentionSumsToOnePerNode) {
  Rng rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    const Qdg a = testing::random_dag(rng, 2 + rng.below(7), "a");
    const Qdg b = testing::random_dag(rng, 1 + rng.below(7), "b");
    const Qdg* graphs[] = {&a, &b};
    const GraphBatch batch = GraphBatch::build(graphs);
    ParamStore params(trial);
    const auto agg = AggregatorParams::create(params, "ag", {6, 3, 5, 1.0});
    std::vector<Var> attention;
    gat_forward(batch, Var::constant(random_tensor(rng, {batch.nodes(), 6}, -3, 3)), agg,
                &attention);
    for (const auto& alpha : attention) {
      std::vector<double> total(batch.nodes(), 0.0);
      for (std::size_t p = 0; p < alpha.size(); ++p) {
        EXPECT_GT(alpha.value()[p], 0.0);
        total[batch.pair_source[p]] += alpha.value()[p];
      }
      for (double t : total) EXPECT_NEAR(t, 1.0, 1e-12);
    }
  }
}

// Renaming ids changes the sorted enumeration order of nodes; outputs keyed
// by node must not move.
TEST(GatTest, InvariantToNodeEnumerationOrder) {
  Rng rng(30);
  for (int trial = 0; trial < 10; ++trial) {
    const Qdg g = testing::random_dag(rng, 7);
    std::map<std::string, std::string> rename;
    std::vector<std::string> fresh;
    for (std::size_t i = 0; i < g.nodes().size(); ++i) fresh.push_back("n" + std::to_string(i));
    rng.shuffle(fresh);
    for (std::size_t i = 0; i < g.nodes().size(); ++i) rename[g.nodes()[i].id] = fresh[i];
    std::vector<QuestionNode> nodes = g.nodes();
    for (auto& n : nodes) n.id = rename[n.id];
    std::vector<QdgEdge> edges = g.edges();
    for (auto& e : edges) e = {rename[e.parent], rename[e.child], e.op};
    rng.shuffle(nodes);
    rng.shuffle(edges);
    const Qdg h = Qdg::build("h", "v", g.edge_types(), nodes, edges);

    ParamStore params(trial);
    const auto agg = AggregatorParams::create(params, "ag", {4, 2, 3, 1.0});
    std::map<std::string, Var> fg, fh;
    for (const auto& n : g.nodes()) {
      const Var f = Var::constant(random_tensor(rng, {4}));
      fg[n.id] = f;
      fh[rename[n.id]] = f;
    }
    const Qdg* gs[] = {&g};
    const Qdg* hs[] = {&h};
    const GraphBatch bg = GraphBatch::build(gs);
    const GraphBatch bh = GraphBatch::build(hs);
    const auto og = aggregate(bg, stack_features(bg, std::span(&fg, 1)), agg);
    const auto oh = aggregate(bh, stack_features(bh, std::span(&fh, 1)), agg);
    for (const auto& n : g.nodes()) {
      const std::size_t rg = bg.row(0, n.id), rh = bh.row(0, rename[n.id]);
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(og.distributions.value().at(rg, c), oh.distributions.value().at(rh, c),
                    1e-14);
      }
    }
  }
}

TEST(GatTest, ShapeErrors) {
  ParamStore params(1);
  const auto agg = AggregatorParams::create(params, "ag", {4, 2, 3, 1.0});
  const Qdg g = chain_graph();
  const Qdg* graphs[] = {&g};
  const GraphBatch batch = GraphBatch::build(graphs);
  EXPECT_THROW(gat_forward(batch, Var::constant(Tensor(Shape{2, 5})), agg), ShapeError);
  EXPECT_THROW(gat_forward(batch, Var::constant(Tensor(Shape{3, 4})), agg), ShapeError);
  std::map<std::string, Var> missing = {{"m", Var::constant(Tensor(Shape{4}))}};
  EXPECT_THROW(stack_features(batch, std::span(&missing, 1)), ShapeError);
  std::map<std::string, Var> ragged = {{"m", Var::constant(Tensor(Shape{4}))},
                                       {"s", Var::constant(Tensor(Shape{3}))}};
  EXPECT_THROW(stack_features(batch, std::span(&ragged, 1)), ShapeError);
  EXPECT_THROW(predict_answers({Var::constant(Tensor(Shape{2, 4}))}, agg), ShapeError);
  EXPECT_THROW(AggregatorParams::create(params, "bad", {4, 0, 3, 1.0}), ConfigError);
  EXPECT_THROW(AggregatorParams::create(params, "bad", {4, 1, 3, 0.0}), ConfigError);
}

TEST(GraphBatchTest, UnionOffsetsAndPairs) {
  const Qdg a = chain_graph();
  const Qdg b = single_node("x");
  const Qdg* graphs[] = {&a, &b};
  const GraphBatch batch = GraphBatch::build(graphs);
  EXPECT_EQ(batch.offsets, (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(batch.pair_source, (std::vector<std::size_t>{0, 0, 1, 2}));
  EXPECT_EQ(batch.pair_target, (std::vector<std::size_t>{0, 1, 1, 2}));
  EXPECT_EQ(batch.edge_parent, (std::vector<std::size_t>{0}));
  EXPECT_EQ(batch.edge_child, (std::vector<std::size_t>{1}));
  EXPECT_EQ(batch.row(1, "x"), 2u);
}

TEST(PredictTest, ZeroHeadGivesUniform) {
  ParamStore params(4);
  auto agg = AggregatorParams::create(params, "ag", {4, 2, 3, 1.0});
  agg.head.weight.mutable_value().fill(0.0);
  Rng rng(5);
  const Qdg g = testing::random_dag(rng, 5);
  const Qdg* graphs[] = {&g};
  const GraphBatch batch = GraphBatch::build(graphs);
  const auto out = aggregate(batch, Var::constant(random_tensor(rng, {5, 4})), agg);
  for (double p : out.distributions.value().data()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(PredictTest, DistributionsSumToOneAndHeadMatchesConcat) {
  ParamStore params(6);
  const auto agg = AggregatorParams::create(params, "ag", {4, 2, 3, 1.0});
  Rng rng(7);
  const Qdg g = testing::random_dag(rng, 5);
  const Qdg* graphs[] = {&g};
  const GraphBatch batch = GraphBatch::build(graphs);
  const auto out = aggregate(batch, Var::constant(random_tensor(rng, {5, 4})), agg);
  const Tensor& w = agg.head.weight.value();
  for (std::size_t i = 0; i < 5; ++i) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += out.distributions.value().at(i, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
    std::vector<double> joined;
    for (const auto& layer : out.layers) {
      for (std::size_t c = 0; c < 4; ++c) joined.push_back(layer.value().at(i, c));
    }
    const std::vector<double> fa = times(joined, w);
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(out.answer_features.value().at(i, c), fa[c] + agg.head.bias.value()[c], 1e-13);
    }
  }
}

// K=1 on an edgeless batch: each node is classified on its own feature.
TEST(PredictTest, EdgelessSingleLayerIsPerNodeClassifier) {
  ParamStore params(8);
  const auto agg = AggregatorParams::create(params, "ag", {4, 1, 5, 1.0});
  const Qdg a = single_node("a"), b = single_node("b"), c = single_node("c");
  const Qdg* graphs[] = {&a, &b, &c};
  const GraphBatch batch = GraphBatch::build(graphs);
  Rng rng(9);
  const Tensor f = random_tensor(rng, {3, 4});
  const auto together = aggregate(batch, Var::constant(f), agg);
  for (std::size_t i = 0; i < 3; ++i) {
    const Var row = Var::constant(Tensor(Shape{1, 4}, {f.at(i, 0), f.at(i, 1), f.at(i, 2), f.at(i, 3)}));
    const Var alone = ad::softmax(agg.head(ad::relu(ad::matmul(row, agg.layers[0].w_g))), 1);
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_NEAR(together.distributions.value().at(i, k), alone.value().at(0, k), 1e-15);
    }
  }
}

TEST(EdgeTest, RepresentationIsLinearInAnswerFeatures) {
  ParamStore params(10);
  const auto agg = AggregatorParams::create(params, "ag", {4, 2, 3, 1.0});
  const Qdg g = chain_graph();
  const Qdg* graphs[] = {&g};
  const GraphBatch batch = GraphBatch::build(graphs);
  const Tensor fa(Shape{2, 3}, {0.5, -1.0, 2.0, 0.25, 0.0, -0.75});
  const Var e = edge_representations(batch, Var::constant(fa), agg);
  ASSERT_EQ(e.shape(), (Shape{1, 4}));
  const std::vector<double> joined = {0.5, -1.0, 2.0, 0.25, 0.0, -0.75};
  const std::vector<double> expected = times(joined, agg.edge.weight.value());
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(e.value().at(0, c), expected[c] + agg.edge.bias.value()[c], 1e-14);
  }
}

TEST(TripletTest, HingeBoundaryIsZero) {
  // e0 and e1 share a type and coincide; e2 sits at distance 1.5 = m.
  const Tensor v(Shape{3, 2}, {0, 0, 0, 0, 1.5, 0});
  const std::optional<Triplet> t[] = {Triplet{0, 1, 2}, std::nullopt, std::nullopt};
  EXPECT_EQ(triplet_loss(Var::constant(v), t, 1.5).item(), 0.0);
}

TEST(TripletTest, EqualDistancesGiveMargin) {
  const Tensor v(Shape{3, 2}, {0, 0, 1, 0, 0, 1});
  const std::optional<Triplet> t[] = {Triplet{0, 1, 2}};
  EXPECT_NEAR(triplet_loss(Var::constant(v), t, 0.7).item(), 0.7, 1e-15);
}

TEST(TripletTest, SampledPairsRespectTypes) {
  const std::vector<std::string> types = {"and", "or", "and", "equals", "or", "and"};
  Rng rng(40);
  for (int trial = 0; trial < 200; ++trial) {
    const auto triplets = sample_triplets(types, rng);
    ASSERT_EQ(triplets.size(), types.size());
    for (std::size_t e = 0; e < types.size(); ++e) {
      if (types[e] == "equals") {
        EXPECT_FALSE(triplets[e].has_value());
        continue;
      }
      ASSERT_TRUE(triplets[e].has_value());
      EXPECT_EQ(triplets[e]->anchor, e);
      EXPECT_NE(triplets[e]->positive, e);
      EXPECT_EQ(types[triplets[e]->positive], types[e]);
      EXPECT_NE(types[triplets[e]->negative], types[e]);
    }
  }
}

TEST(TripletTest, SingleTypeHasNoNegatives) {
  const std::vector<std::string> types = {"and", "and"};
  Rng rng(41);
  for (const auto& t : sample_triplets(types, rng)) EXPECT_FALSE(t.has_value());
  EXPECT_EQ(edge_triplet_loss(Var::constant(Tensor(Shape{2, 3}, 1.0)), types, 1.0, rng).item(),
            0.0);
}

TEST(TripletTest, FixedSeedMatchesHandExpansion) {
  const std::vector<std::string> types = {"and", "or", "and", "or", "and"};
  Rng data(42);
  const Tensor v = random_tensor(data, {5, 3});
  Rng a(43), b(43);
  const double loss = edge_triplet_loss(Var::constant(v), types, 0.9, a).item();
  const auto triplets = sample_triplets(types, b);
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += (v.at(i, c) - v.at(j, c)) * (v.at(i, c) - v.at(j, c));
    return std::sqrt(s);
  };
  double expected = 0.0;
  for (const auto& t : triplets) {
    expected += std::max(dist(t->anchor, t->positive) - dist(t->anchor, t->negative) + 0.9, 0.0);
  }
  EXPECT_NEAR(loss, expected / 5.0, 1e-14);
}

TEST(TripletTest, NonNegativeAndZeroWhenSeparated) {
  Rng rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<std::string> types;
    for (std::size_t i = 0; i < n; ++i) types.push_back(rng.bernoulli(0.5) ? "and" : "or");
    EXPECT_GE(edge_triplet_loss(Var::constant(random_tensor(rng, {n, 3}, -2, 2)), types, 1.0, rng)
                  .item(),
              0.0);
    // Same-type edges coincide; types sit 2 apart with margin 1.
    Tensor separated(Shape{n, 3});
    for (std::size_t i = 0; i < n; ++i) separated.at(i, 0) = types[i] == "and" ? 0.0 : 2.0;
    EXPECT_EQ(edge_triplet_loss(Var::constant(separated), types, 1.0, rng).item(), 0.0);
  }
}

TEST(TripletTest, EmptyEdgeSetIsZero) {
  Rng rng(45);
  EXPECT_EQ(edge_triplet_loss(Var::constant(Tensor(Shape{0, 4})), {}, 1.0, rng).item(), 0.0);
}

TEST(AggregationLossTest, SaturatedPredictionsGiveNearZero) {
  Tensor logits(Shape{3, 5}, 0.0);
  const std::optional<std::size_t> gold[] = {0, 4, 2};
  for (std::size_t i = 0; i < 3; ++i) logits.at(i, *gold[i]) = 30.0;
  EXPECT_LT(aggregation_loss(Var::constant(logits), gold, Var::scalar(0.0)).item(), 1e-6);
}

TEST(AggregationLossTest, UniformPredictionsGiveLn5) {
  const std::optional<std::size_t> gold[] = {0, 1, 2, 3};
  EXPECT_NEAR(
      aggregation_loss(Var::constant(Tensor(Shape{4, 5}, 0.3)), gold, Var::scalar(0.0)).item(),
      std::log(5.0), 1e-12);
  EXPECT_NEAR(
      aggregation_loss(Var::constant(Tensor(Shape{4, 5}, 0.3)), gold, Var::scalar(0.25)).item(),
      std::log(5.0) + 0.25, 1e-12);
}

TEST(AggregationLossTest, MissingGoldAndShape) {
  const std::optional<std::size_t> gold[] = {0, std::nullopt};
  EXPECT_THROW(aggregation_loss(Var::constant(Tensor(Shape{2, 5})), gold, Var::scalar(0.0)),
               MissingGoldError);
  EXPECT_THROW(aggregation_loss(Var::constant(Tensor(Shape{3, 5})), gold, Var::scalar(0.0)),
               ShapeError);
}

struct Cluster {
  std::vector<Qdg> graphs;
  GraphBatch batch;
  std::vector<std::optional<std::size_t>> gold;
};

Cluster random_cluster(Rng& rng, std::size_t vocab) {
  Cluster c;
  c.graphs.push_back(testing::random_dag(rng, 5, "a", 0.4));
  c.graphs.push_back(testing::random_dag(rng, 4, "b", 0.4));
  const Qdg* graphs[] = {&c.graphs[0], &c.graphs[1]};
  c.batch = GraphBatch::build(graphs);
  for (std::size_t i = 0; i < c.batch.nodes(); ++i) c.gold.push_back(rng.below(vocab));
  return c;
}

// Attention-score weights of the second layer carry gradients near 1e-8,
// where central-difference roundoff dominates the relative error; these
// checks add an absolute allowance of 1e-9.
TEST(AggregatorGradientTest, GatAndHeadAgreeBeyondRoundoff) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 50);
    const Cluster c = random_cluster(rng, 4);
    ParamStore params(seed);
    const auto agg = AggregatorParams::create(params, "ag", {5, 2, 4, 1.0});
    std::vector<Var> inputs = {Var::parameter(random_tensor(rng, {c.batch.nodes(), 5}))};
    testing::append_params(inputs, params);
    const Tensor w = random_tensor(rng, {c.batch.nodes(), 4});
    const auto r = nn::grad_check(
        [&](const std::vector<Var>& in) {
          return ad::sum(ad::mul(aggregate(c.batch, in[0], agg).distributions, Var::constant(w)));
        },
        inputs);
    EXPECT_EQ(coordinates_beyond(r, 1e-4, 1e-9), 0u) << testing::describe(r, inputs, params);
  }
}

TEST(AggregatorGradientTest, TripletMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 60);
    const Cluster c = random_cluster(rng, 4);
    ParamStore params(seed);
    const auto agg = AggregatorParams::create(params, "ag", {5, 2, 4, 0.5});
    const auto triplets = sample_triplets(c.batch.edge_type, rng);
    std::vector<Var> inputs = {Var::parameter(random_tensor(rng, {c.batch.nodes(), 4}))};
    testing::append_params(inputs, params);
    const auto r = nn::grad_check(
        [&](const std::vector<Var>& in) {
          return triplet_loss(edge_representations(c.batch, in[0], agg), triplets, 0.5);
        },
        inputs);
    EXPECT_LT(r.max_relative_error, 1e-4) << testing::describe(r, inputs, params);
  }
}

TEST(AggregatorGradientTest, TotalLossAgreesBeyondRoundoff) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 70);
    const Cluster c = random_cluster(rng, 4);
    ParamStore params(seed);
    const auto agg = AggregatorParams::create(params, "ag", {5, 2, 4, 1.0});
    const auto triplets = sample_triplets(c.batch.edge_type, rng);
    std::vector<Var> inputs = {Var::parameter(random_tensor(rng, {c.batch.nodes(), 5}))};
    testing::append_params(inputs, params);
    const auto r = nn::grad_check(
        [&](const std::vector<Var>& in) {
          const auto out = aggregate(c.batch, in[0], agg);
          return aggregation_loss(
              out.answer_features, c.gold,
              triplet_loss(edge_representations(c.batch, out.answer_features, agg), triplets,
                           1.0));
        },
        inputs);
    EXPECT_EQ(coordinates_beyond(r, 1e-4, 1e-9), 0u) << testing::describe(r, inputs, params);
  }
}

}  // namespace
}  // namespace va3
