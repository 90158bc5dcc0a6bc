#include "va3/aggregator.hpp"

#include <algorithm>
#include <string>

namespace va3 {

using ad::Var;

void AggregatorDims::validate() const {
  if (layers == 0) throw ConfigError("aggregator needs at least one GAT layer");
  if (!(margin > 0.0)) throw ConfigError("triplet margin must be positive");
  if (h == 0 || vocab == 0) throw ConfigError("aggregator widths must be positive");
}

AggregatorParams AggregatorParams::create(ParamStore& params, const std::string& name,
                                          const AggregatorDims& dims) {
  dims.validate();
  AggregatorParams out;
  out.dims = dims;
  for (std::size_t k = 0; k < dims.layers; ++k) {
    const std::string layer = name + ".gat" + std::to_string(k);
    out.layers.push_back({params.weight(layer + ".a", dims.h, 1),
                          params.weight(layer + ".ws", 2 * dims.h, dims.h),
                          params.weight(layer + ".wg", dims.h, dims.h)});
  }
  out.head = nn::Linear::create(params, name + ".head", dims.layers * dims.h, dims.vocab);
  out.edge = nn::Linear::create(params, name + ".edge", 2 * dims.vocab, dims.h);
  return out;
}

GraphBatch GraphBatch::build(std::span<const Qdg* const> graphs) {
  GraphBatch batch;
  batch.graphs.assign(graphs.begin(), graphs.end());
  std::size_t offset = 0;
  for (const Qdg* g : graphs) {
    batch.offsets.push_back(offset);
    const std::size_t n = g->nodes().size();
    for (std::size_t i = 0; i < n; ++i) {
      batch.pair_source.push_back(offset + i);
      batch.pair_target.push_back(offset + i);
      for (std::size_t j : g->children(i)) {
        batch.pair_source.push_back(offset + i);
        batch.pair_target.push_back(offset + j);
      }
    }
    for (const QdgEdge& e : g->edges()) {
      batch.edge_parent.push_back(offset + g->index_of(e.parent));
      batch.edge_child.push_back(offset + g->index_of(e.child));
      batch.edge_type.push_back(e.op);
    }
    offset += n;
  }
  batch.offsets.push_back(offset);
  return batch;
}

std::size_t GraphBatch::row(std::size_t g, std::string_view id) const {
  if (g >= graphs.size()) throw IndexError("graph " + std::to_string(g) + " not in batch");
  return offsets[g] + graphs[g]->index_of(id);
}

Var stack_features(const GraphBatch& batch,
                   std::span<const std::map<std::string, Var>> features) {
  if (features.size() != batch.graphs.size()) {
    throw ShapeError("expected features for " + std::to_string(batch.graphs.size()) +
                     " graphs, got " + std::to_string(features.size()));
  }
  std::vector<Var> rows;
  rows.reserve(batch.nodes());
  std::size_t width = 0;
  for (std::size_t g = 0; g < batch.graphs.size(); ++g) {
    for (const QuestionNode& node : batch.graphs[g]->nodes()) {
      const auto it = features[g].find(node.id);
      if (it == features[g].end()) {
        throw ShapeError("no feature for node " + node.id + " of graph " +
                         batch.graphs[g]->graph_id());
      }
      const Var& f = it->second;
      if (f.shape().size() != 1 || (width != 0 && f.dim(0) != width)) {
        throw ShapeError("node " + node.id + " feature has shape " +
                         shape_to_string(f.shape()));
      }
      width = f.dim(0);
      rows.push_back(ad::reshape(f, {1, width}));
    }
  }
  if (rows.empty()) throw ShapeError("batch has no nodes");
  return ad::concat(rows, 0);
}

std::vector<Var> gat_forward(const GraphBatch& batch, const Var& features,
                             const AggregatorParams& params, std::vector<Var>* attention) {
  const std::size_t n = batch.nodes();
  const std::size_t h = params.dims.h;
  if (features.shape() != Shape{n, h}) {
    throw ShapeError("GAT features must be [" + std::to_string(n) + ", " + std::to_string(h) +
                     "], got " + shape_to_string(features.shape()));
  }
  const std::size_t pairs = batch.pair_source.size();
  std::vector<Var> layers;
  Var f = features;
  for (const GatLayer& layer : params.layers) {
    const Var joined = ad::concat({ad::index_select(f, batch.pair_source),
                                   ad::index_select(f, batch.pair_target)},
                                  1);
    const Var scores =
        ad::reshape(ad::matmul(ad::leaky_relu(ad::matmul(joined, layer.w_s)), layer.a), {pairs});
    const Var alpha = ad::segment_softmax(scores, batch.pair_source, n);
    if (attention) attention->push_back(alpha);
    const Var messages = ad::mul(ad::index_select(ad::matmul(f, layer.w_g), batch.pair_target),
                                 ad::reshape(alpha, {pairs, 1}));
    f = ad::relu(ad::segment_sum(messages, batch.pair_source, n));
    layers.push_back(f);
  }
  return layers;
}

AggregatorOutput predict_answers(const std::vector<Var>& layers, const AggregatorParams& params) {
  if (layers.size() != params.dims.layers) {
    throw ShapeError("expected " + std::to_string(params.dims.layers) + " layer outputs, got " +
                     std::to_string(layers.size()));
  }
  AggregatorOutput out;
  out.layers = layers;
  out.answer_features = params.head(layers.size() == 1 ? layers[0] : ad::concat(layers, 1));
  out.distributions = ad::softmax(out.answer_features, 1);
  return out;
}

AggregatorOutput aggregate(const GraphBatch& batch, const Var& features,
                           const AggregatorParams& params) {
  return predict_answers(gat_forward(batch, features, params), params);
}

Var edge_representations(const GraphBatch& batch, const Var& answer_features,
                         const AggregatorParams& params) {
  if (batch.edges() == 0) return Var::constant(Tensor(Shape{0, params.dims.h}));
  return params.edge(ad::concat({ad::index_select(answer_features, batch.edge_parent),
                                 ad::index_select(answer_features, batch.edge_child)},
                                1));
}

std::vector<std::optional<Triplet>> sample_triplets(std::span<const std::string> types,
                                                    Rng& rng) {
  std::vector<std::optional<Triplet>> out(types.size());
  std::vector<std::size_t> same, other;
  for (std::size_t e = 0; e < types.size(); ++e) {
    same.clear();
    other.clear();
    for (std::size_t f = 0; f < types.size(); ++f) {
      if (f == e) continue;
      (types[f] == types[e] ? same : other).push_back(f);
    }
    if (same.empty() || other.empty()) continue;
    const std::size_t positive = same[rng.below(same.size())];
    const std::size_t negative = other[rng.below(other.size())];
    out[e] = Triplet{e, positive, negative};
  }
  return out;
}

Var triplet_loss(const Var& edge_vectors, std::span<const std::optional<Triplet>> triplets,
                 double margin) {
  if (triplets.empty()) return Var::scalar(0.0);
  std::vector<std::size_t> anchor, positive, negative;
  for (const auto& t : triplets) {
    if (!t) continue;
    anchor.push_back(t->anchor);
    positive.push_back(t->positive);
    negative.push_back(t->negative);
  }
  if (anchor.empty()) return Var::scalar(0.0);
  const Var a = ad::index_select(edge_vectors, anchor);
  const Var hinge =
      ad::relu(ad::add_scalar(ad::sub(ad::row_distance(a, ad::index_select(edge_vectors, positive)),
                                      ad::row_distance(a, ad::index_select(edge_vectors, negative))),
                              margin));
  return ad::scale(ad::sum(hinge), 1.0 / static_cast<double>(triplets.size()));
}

Var edge_triplet_loss(const Var& edge_vectors, std::span<const std::string> types, double margin,
                      Rng& rng) {
  if (edge_vectors.shape().empty() || edge_vectors.dim(0) != types.size()) {
    throw ShapeError("edge vectors " + shape_to_string(edge_vectors.shape()) + " for " +
                     std::to_string(types.size()) + " edge types");
  }
  const auto triplets = sample_triplets(types, rng);
  return triplet_loss(edge_vectors, triplets, margin);
}

Var aggregation_loss(const Var& answer_features, std::span<const std::optional<std::size_t>> gold,
                     const Var& triplet) {
  if (answer_features.shape().size() != 2 || answer_features.dim(0) != gold.size()) {
    throw ShapeError("answer features " + shape_to_string(answer_features.shape()) + " for " +
                     std::to_string(gold.size()) + " gold answers");
  }
  std::vector<std::size_t> targets;
  targets.reserve(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (!gold[i]) throw MissingGoldError("node row " + std::to_string(i) + " has no gold answer");
    targets.push_back(*gold[i]);
  }
  return ad::add(ad::softmax_cross_entropy(answer_features, targets), triplet);
}

}  // namespace va3
