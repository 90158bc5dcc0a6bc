#include "va3/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "va3/aggregator.hpp"
#include "va3/aligner.hpp"
#include "va3/synthetic.hpp"

namespace va3 {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

using ad::Var;

Tensor random_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = rng.uniform(-1.0, 1.0);
  return t;
}

// Checked inputs, labels for reporting, and the function under test.
struct Probe {
  std::vector<Var> inputs;
  std::vector<std::string> labels;
  nn::ScalarFunction function;

  void input(const std::string& label, Var v) {
    inputs.push_back(std::move(v));
    labels.push_back(label);
  }
  void parameters(const ParamStore& params) {
    for (const auto& [name, p] : params.params()) {
      if (!shift_invariant_parameter(name)) input(name, p);
    }
  }
};

// Keeps model parameters alive for the duration of one probe.
struct Case {
  std::unique_ptr<ParamStore> params;
  Probe probe;
  std::shared_ptr<void> state;
};

using CaseBuilder = std::function<Case(std::uint64_t seed)>;

struct SuiteEntry {
  std::string module;
  std::string op;
  CaseBuilder build;
};

Var weighted_sum(const Var& x, const Tensor& w) { return ad::sum(ad::mul(x, Var::constant(w))); }

AlignerDims suite_aligner_dims() { return {4, 4, 6, 5, 2}; }

VideoFeatures random_video(Rng& rng, std::size_t n_c, const AlignerDims& d) {
  return {random_tensor(rng, {n_c, 2, 2, d.h_v}), random_tensor(rng, {n_c, 2, d.h_v}),
          random_tensor(rng, {n_c, d.h_v})};
}

struct GraphState {
  std::vector<SyntheticInstance> instances;
  GraphBatch batch;
  std::vector<std::optional<std::size_t>> gold;
  std::vector<std::optional<Triplet>> triplets;
};

std::shared_ptr<GraphState> random_graphs(std::uint64_t seed, std::size_t vocab) {
  SyntheticConfig config;
  config.n_c = 2;
  config.subs_max = 3;
  config.decompose_prob = 0.5;
  config.seed = seed;
  auto state = std::make_shared<GraphState>();
  for (std::size_t i = 0; i < 2; ++i) state->instances.push_back(generate_instance(config, i));
  std::vector<const Qdg*> graphs;
  for (const auto& inst : state->instances) graphs.push_back(&inst.graph);
  state->batch = GraphBatch::build(graphs);
  Rng rng(seed, 0x67a7);
  for (std::size_t i = 0; i < state->batch.nodes(); ++i) state->gold.push_back(rng.below(vocab));
  state->triplets = sample_triplets(state->batch.edge_type, rng);
  return state;
}

std::vector<SuiteEntry> suite() {
  std::vector<SuiteEntry> s;
  s.push_back({"autodiff", "matmul+softmax", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 1);
    const Tensor w = random_tensor(rng, {3, 4});
    c.probe.input("a", Var::parameter(random_tensor(rng, {3, 5})));
    c.probe.input("b", Var::parameter(random_tensor(rng, {5, 4})));
    c.probe.function = [w](const std::vector<Var>& in) {
      return weighted_sum(ad::softmax(ad::matmul(in[0], in[1]), 1), w);
    };
    return c;
  }});
  s.push_back({"autodiff", "layer_norm", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 2);
    const Tensor w = random_tensor(rng, {3, 6});
    c.probe.input("x", Var::parameter(random_tensor(rng, {3, 6})));
    c.probe.input("gain", Var::parameter(random_tensor(rng, {6})));
    c.probe.input("bias", Var::parameter(random_tensor(rng, {6})));
    c.probe.function = [w](const std::vector<Var>& in) {
      return weighted_sum(ad::layer_norm(in[0], in[1], in[2]), w);
    };
    return c;
  }});
  s.push_back({"autodiff", "softmax_cross_entropy", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 3);
    std::vector<std::size_t> targets = {rng.below(5), rng.below(5), rng.below(5), rng.below(5)};
    c.probe.input("logits", Var::parameter(random_tensor(rng, {4, 5})));
    c.probe.function = [targets](const std::vector<Var>& in) {
      return ad::softmax_cross_entropy(in[0], targets);
    };
    return c;
  }});
  s.push_back({"autodiff", "segment_softmax+segment_sum", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 4);
    std::vector<std::size_t> segments = {0, 0, 1, 2, 2, 2};
    const Tensor w = random_tensor(rng, {3, 4});
    c.probe.input("scores", Var::parameter(random_tensor(rng, {6})));
    c.probe.input("values", Var::parameter(random_tensor(rng, {6, 4})));
    c.probe.function = [segments, w](const std::vector<Var>& in) {
      const Var alpha = ad::reshape(ad::segment_softmax(in[0], segments, 3), {6, 1});
      return weighted_sum(ad::segment_sum(ad::mul(in[1], ad::matmul(alpha, Var::constant(
                                                                        Tensor(Shape{1, 4}, 1.0)))),
                                          segments, 3),
                          w);
    };
    return c;
  }});
  s.push_back({"autodiff", "row_distance", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 5);
    const Tensor w = random_tensor(rng, {4});
    c.probe.input("a", Var::parameter(random_tensor(rng, {4, 3})));
    c.probe.input("b", Var::parameter(random_tensor(rng, {4, 3})));
    c.probe.function = [w](const std::vector<Var>& in) {
      return weighted_sum(ad::row_distance(in[0], in[1]), w);
    };
    return c;
  }});
  s.push_back({"autodiff", "gumbel_softmax", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 6);
    const Tensor noise = nn::sample_gumbel({4, 2}, rng);
    const Tensor w = random_tensor(rng, {4, 2});
    c.probe.input("logits", Var::parameter(random_tensor(rng, {4, 2})));
    c.probe.function = [noise, w](const std::vector<Var>& in) {
      return weighted_sum(nn::gumbel_softmax(in[0], noise, 0.7, false), w);
    };
    return c;
  }});

  s.push_back({"aligner", "transformer_layer", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto layer = std::make_shared<nn::TransformerLayer>(
        nn::TransformerLayer::create(*c.params, "tf", 8, 2));
    c.state = layer;
    Rng rng(seed, 7);
    const Tensor w = random_tensor(rng, {3, 8});
    c.probe.input("query", Var::parameter(random_tensor(rng, {3, 8})));
    c.probe.input("key", Var::parameter(random_tensor(rng, {5, 8})));
    c.probe.input("value", Var::parameter(random_tensor(rng, {5, 8})));
    c.probe.parameters(*c.params);
    c.probe.function = [layer, w](const std::vector<Var>& in) {
      return weighted_sum((*layer)(in[0], in[1], in[2]), w);
    };
    return c;
  }});
  s.push_back({"aligner", "object_aggregation", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto aligner = std::make_shared<Aligner>(Aligner::create(*c.params, "al", suite_aligner_dims()));
    c.state = aligner;
    Rng rng(seed, 8);
    c.probe.input("f_o", Var::parameter(random_tensor(rng, {2, 2, 3, 4})));
    c.probe.input("f_a", Var::parameter(random_tensor(rng, {2, 2, 4})));
    c.probe.input("f_q", Var::parameter(random_tensor(rng, {2, 4})));
    c.probe.parameters(*c.params);
    const Tensor w = random_tensor(rng, {2, 2, 8});
    c.probe.function = [aligner, w](const std::vector<Var>& in) {
      return weighted_sum(aggregate_objects(in[0], in[1], in[2], *aligner), w);
    };
    return c;
  }});
  s.push_back({"aligner", "frame_aggregation", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto aligner = std::make_shared<Aligner>(Aligner::create(*c.params, "al", suite_aligner_dims()));
    c.state = aligner;
    Rng rng(seed, 9);
    c.probe.input("f_a_c", Var::parameter(random_tensor(rng, {3, 2, 8})));
    c.probe.input("f_m", Var::parameter(random_tensor(rng, {3, 4})));
    c.probe.input("f_q", Var::parameter(random_tensor(rng, {2, 4})));
    c.probe.parameters(*c.params);
    const Tensor w = random_tensor(rng, {3, 8});
    c.probe.function = [aligner, w](const std::vector<Var>& in) {
      return weighted_sum(aggregate_frames(in[0], in[1], in[2], *aligner), w);
    };
    return c;
  }});
  s.push_back({"aligner", "soft_clip_indicator", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto aligner = std::make_shared<Aligner>(Aligner::create(*c.params, "al", suite_aligner_dims()));
    c.state = aligner;
    Rng rng(seed, 10);
    const Tensor noise = nn::sample_gumbel({3, 2}, rng);
    const Tensor w = random_tensor(rng, {3, 2});
    c.probe.input("f_m_c", Var::parameter(random_tensor(rng, {3, 8})));
    c.probe.input("f_q", Var::parameter(random_tensor(rng, {2, 4})));
    c.probe.parameters(*c.params);
    c.probe.function = [aligner, noise, w](const std::vector<Var>& in) {
      return weighted_sum(clip_indicator(in[0], in[1], *aligner, 1.0, false, noise).indicator, w);
    };
    return c;
  }});
  s.push_back({"aligner", "contrastive_loss", [](std::uint64_t seed) {
    Case c;
    Rng rng(seed, 11);
    c.probe.input("anchor", Var::parameter(random_tensor(rng, {8})));
    c.probe.input("positive", Var::parameter(random_tensor(rng, {8})));
    c.probe.input("negative", Var::parameter(random_tensor(rng, {8})));
    c.probe.function = [](const std::vector<Var>& in) {
      return alignment_contrastive_loss(in[0], in[1], in[2]);
    };
    return c;
  }});
  s.push_back({"aligner", "aligner_total_loss", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    const AlignerDims dims = suite_aligner_dims();
    auto model = std::make_shared<AlignerModel>(AlignerModel::create(*c.params, dims));
    c.state = model;
    Rng rng(seed, 12);
    const VideoFeatures video = random_video(rng, 2, dims);
    const Tensor question = random_tensor(rng, {2, dims.h_q});
    const Tensor replacements = random_tensor(rng, {2, dims.h_v});
    const Tensor noise = nn::sample_gumbel({2, 2}, rng);
    const std::size_t gold = rng.below(dims.vocab);
    c.probe.parameters(*c.params);
    c.probe.function = [=](const std::vector<Var>&) {
      return aligner_answer_and_loss(*model, video, question, gold, replacements,
                                     {1.0, false, true}, noise)
          .loss;
    };
    return c;
  }});

  s.push_back({"aggregator", "gat_and_head", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto agg = std::make_shared<AggregatorParams>(
        AggregatorParams::create(*c.params, "ag", {5, 2, 4, 1.0}));
    auto graphs = random_graphs(seed, 4);
    c.state = std::make_shared<std::pair<decltype(agg), decltype(graphs)>>(agg, graphs);
    Rng rng(seed, 13);
    const Tensor w = random_tensor(rng, {graphs->batch.nodes(), 4});
    c.probe.input("features", Var::parameter(random_tensor(rng, {graphs->batch.nodes(), 5})));
    c.probe.parameters(*c.params);
    c.probe.function = [agg, graphs, w](const std::vector<Var>& in) {
      return weighted_sum(aggregate(graphs->batch, in[0], *agg).distributions, w);
    };
    return c;
  }});
  s.push_back({"aggregator", "edge_triplet_loss", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto agg = std::make_shared<AggregatorParams>(
        AggregatorParams::create(*c.params, "ag", {5, 2, 4, 0.5}));
    auto graphs = random_graphs(seed, 4);
    c.state = std::make_shared<std::pair<decltype(agg), decltype(graphs)>>(agg, graphs);
    Rng rng(seed, 14);
    c.probe.input("answer_features",
                  Var::parameter(random_tensor(rng, {graphs->batch.nodes(), 4})));
    c.probe.parameters(*c.params);
    c.probe.function = [agg, graphs](const std::vector<Var>& in) {
      return triplet_loss(edge_representations(graphs->batch, in[0], *agg), graphs->triplets,
                          0.5);
    };
    return c;
  }});
  s.push_back({"aggregator", "aggregation_total_loss", [](std::uint64_t seed) {
    Case c;
    c.params = std::make_unique<ParamStore>(seed);
    auto agg = std::make_shared<AggregatorParams>(
        AggregatorParams::create(*c.params, "ag", {5, 2, 4, 1.0}));
    auto graphs = random_graphs(seed, 4);
    c.state = std::make_shared<std::pair<decltype(agg), decltype(graphs)>>(agg, graphs);
    Rng rng(seed, 15);
    c.probe.input("features", Var::parameter(random_tensor(rng, {graphs->batch.nodes(), 5})));
    c.probe.parameters(*c.params);
    c.probe.function = [agg, graphs](const std::vector<Var>& in) {
      const AggregatorOutput out = aggregate(graphs->batch, in[0], *agg);
      return aggregation_loss(
          out.answer_features, graphs->gold,
          triplet_loss(edge_representations(graphs->batch, out.answer_features, *agg),
                       graphs->triplets, 1.0));
    };
    return c;
  }});
  return s;
}

}  // namespace

bool shift_invariant_parameter(const std::string& name) {
  return ends_with(name, ".k.b") || ends_with(name, ".score_obj.b") ||
         ends_with(name, ".score_frame.b") || ends_with(name, ".edge.b");
}

std::vector<ad::Var> checkable_parameters(const ParamStore& params) {
  std::vector<ad::Var> out;
  for (const auto& [name, p] : params.params()) {
    if (!shift_invariant_parameter(name)) out.push_back(p);
  }
  return out;
}

std::size_t coordinates_beyond(const nn::GradCheckResult& result, double relative,
                               double absolute) {
  std::size_t count = 0;
  for (std::size_t n = 0; n < result.analytic_gradients.size(); ++n) {
    const Tensor& a = result.analytic_gradients[n];
    const Tensor& b = result.numeric_gradients[n];
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double tol = relative * std::max(std::fabs(a[i]), std::fabs(b[i])) + absolute;
      if (std::fabs(a[i] - b[i]) > tol) ++count;
    }
  }
  return count;
}

std::size_t coordinate_count(const nn::GradCheckResult& result) {
  std::size_t count = 0;
  for (const Tensor& a : result.analytic_gradients) count += a.size();
  return count;
}

std::vector<std::string> grad_suite_modules() { return {"autodiff", "aligner", "aggregator"}; }

std::vector<OpGradCheck> run_grad_suite(const std::string& module, std::size_t instances) {
  const auto modules = grad_suite_modules();
  if (module != "all" && std::find(modules.begin(), modules.end(), module) == modules.end()) {
    throw ConfigError("unknown gradcheck module '" + module + "'");
  }
  if (instances == 0) throw ConfigError("gradcheck needs at least one instance");
  std::vector<OpGradCheck> out;
  for (const SuiteEntry& entry : suite()) {
    if (module != "all" && entry.module != module) continue;
    OpGradCheck check{entry.module, entry.op, instances};
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
      Case c = entry.build(seed);
      const nn::GradCheckResult r = nn::grad_check(c.probe.function, c.probe.inputs);
      check.coordinates += coordinate_count(r);
      check.beyond_roundoff +=
          coordinates_beyond(r, kGradRelativeTolerance, kGradRoundoffAllowance);
      if (seed == 0 || r.max_relative_error > check.max_relative_error) {
        check.max_relative_error = r.max_relative_error;
        check.worst = c.probe.labels.at(r.worst_input) + "[" + std::to_string(r.worst_index) +
                      "] seed " + std::to_string(seed);
      }
    }
    out.push_back(std::move(check));
  }
  return out;
}

}  // namespace va3
