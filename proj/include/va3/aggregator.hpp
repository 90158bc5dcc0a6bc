#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "va3/autodiff.hpp"
#include "va3/metrics.hpp"
#include "va3/nn.hpp"
#include "va3/params.hpp"
#include "va3/qdg.hpp"
#include "va3/random.hpp"

namespace va3 {

struct AggregatorDims {
  std::size_t h = 16;
  std::size_t layers = 2;  // K
  std::size_t vocab = 5;
  double margin = 1.0;

  void validate() const;  // ConfigError unless K >= 1, m > 0, widths > 0
};

struct GatLayer {
  ad::Var a;    // [h, 1]
  ad::Var w_s;  // [2h, h]
  ad::Var w_g;  // [h, h]
};

struct AggregatorParams {
  AggregatorDims dims;
  std::vector<GatLayer> layers;
  nn::Linear head;  // W_o2, b_o2: K*h -> vocab
  nn::Linear edge;  // W_e, b_e: 2*vocab -> h

  static AggregatorParams create(ParamStore& params, const std::string& name,
                                 const AggregatorDims& dims);
};

/// Disjoint union of several QDGs with flat node indices.
///
/// Node rows follow each graph's sorted node order, graphs in input order.
/// Attention pairs are (i, j) for j a child of i plus the self pair (i, i).
struct GraphBatch {
  std::vector<const Qdg*> graphs;
  std::vector<std::size_t> offsets;  // first row of each graph, plus the total
  std::vector<std::size_t> pair_source;
  std::vector<std::size_t> pair_target;
  std::vector<std::size_t> edge_parent;
  std::vector<std::size_t> edge_child;
  std::vector<std::string> edge_type;  // edge op label

  static GraphBatch build(std::span<const Qdg* const> graphs);
  std::size_t nodes() const { return offsets.back(); }
  std::size_t edges() const { return edge_parent.size(); }
  // Flat row of `id` in graph `g`.
  std::size_t row(std::size_t g, std::string_view id) const;
};

// Feature rows [N, h] for a batch from per-graph id -> feature maps.
// ShapeError on a missing node or unequal widths.
ad::Var stack_features(const GraphBatch& batch,
                       std::span<const std::map<std::string, ad::Var>> features);

// K layer outputs, each [N, h]. `attention`, when given, receives one [P]
// vector of pair weights per layer in pair order.
std::vector<ad::Var> gat_forward(const GraphBatch& batch, const ad::Var& features,
                                 const AggregatorParams& params,
                                 std::vector<ad::Var>* attention = nullptr);

struct AggregatorOutput {
  std::vector<ad::Var> layers;
  ad::Var answer_features;  // f^a, [N, vocab]
  ad::Var distributions;    // row softmax of f^a
};

AggregatorOutput predict_answers(const std::vector<ad::Var>& layers,
                                 const AggregatorParams& params);
AggregatorOutput aggregate(const GraphBatch& batch, const ad::Var& features,
                           const AggregatorParams& params);

// f^e = W_e [f^a_parent || f^a_child] + b_e, [E, h].
ad::Var edge_representations(const GraphBatch& batch, const ad::Var& answer_features,
                             const AggregatorParams& params);

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;  // distinct edge of the same type
  std::size_t negative = 0;  // edge of another type
  bool operator==(const Triplet&) const = default;
};

// One draw per edge; nullopt when no same-type or no other-type edge exists.
std::vector<std::optional<Triplet>> sample_triplets(std::span<const std::string> types, Rng& rng);

// Mean over all edges of max(d(e, e+) - d(e, e-) + m, 0); edges without a
// triplet add 0 but still count. Zero for an empty edge set.
ad::Var triplet_loss(const ad::Var& edge_vectors,
                     std::span<const std::optional<Triplet>> triplets, double margin);
ad::Var edge_triplet_loss(const ad::Var& edge_vectors, std::span<const std::string> types,
                          double margin, Rng& rng);

// Mean node cross-entropy of f^a against gold indices, plus `triplet`.
// MissingGoldError if any node lacks gold.
ad::Var aggregation_loss(const ad::Var& answer_features,
                         std::span<const std::optional<std::size_t>> gold,
                         const ad::Var& triplet);

}  // namespace va3
