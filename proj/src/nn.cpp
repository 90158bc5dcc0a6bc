#include "va3/nn.hpp"

#include <algorithm>
#include <cmath>

namespace va3::nn {

using ad::Var;

Linear Linear::create(ParamStore& params, const std::string& name, std::size_t in,
                      std::size_t out) {
  return {params.weight(name + ".w", in, out), params.zeros(name + ".b", Shape{out})};
}

Var Linear::operator()(const Var& x) const {
  return ad::add(ad::matmul(x, weight), bias);
}

Mlp Mlp::create(ParamStore& params, const std::string& name, std::size_t in,
                std::size_t hidden, std::size_t out) {
  return {Linear::create(params, name + ".0", in, hidden),
          Linear::create(params, name + ".1", hidden, out)};
}

Var Mlp::operator()(const Var& x) const { return output(ad::relu(hidden(x))); }

TransformerLayer TransformerLayer::create(ParamStore& params, const std::string& name,
                                          std::size_t width, std::size_t heads,
                                          std::size_t ffn_multiplier) {
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("transformer width " + std::to_string(width) +
                     " not divisible by head count " + std::to_string(heads));
  }
  TransformerLayer t;
  t.width = width;
  t.heads = heads;
  t.query = Linear::create(params, name + ".q", width, width);
  t.key = Linear::create(params, name + ".k", width, width);
  t.value = Linear::create(params, name + ".v", width, width);
  t.out = Linear::create(params, name + ".o", width, width);
  t.norm1_gain = params.ones(name + ".ln1.g", Shape{width});
  t.norm1_bias = params.zeros(name + ".ln1.b", Shape{width});
  t.ffn_in = Linear::create(params, name + ".ff1", width, width * ffn_multiplier);
  t.ffn_out = Linear::create(params, name + ".ff2", width * ffn_multiplier, width);
  t.norm2_gain = params.ones(name + ".ln2.g", Shape{width});
  t.norm2_bias = params.zeros(name + ".ln2.b", Shape{width});
  return t;
}

Var TransformerLayer::operator()(const Var& q_in, const Var& k_in, const Var& v_in,
                                 std::vector<Var>* attention) const {
  auto check = [&](const Var& x, const char* what) {
    if (x.shape().size() != 2 || x.dim(1) != width) {
      throw ShapeError(std::string("transformer ") + what + " must be [n x " +
                       std::to_string(width) + "], got " + shape_to_string(x.shape()));
    }
  };
  check(q_in, "query");
  check(k_in, "key");
  check(v_in, "value");
  if (k_in.dim(0) != v_in.dim(0)) {
    throw ShapeError("transformer key/value row counts differ: " +
                     std::to_string(k_in.dim(0)) + " vs " + std::to_string(v_in.dim(0)));
  }
  if (k_in.dim(0) == 0) throw ShapeError("transformer needs at least one key row");

  const std::size_t head_width = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_width));
  const Var q = query(q_in);
  const Var k = key(k_in);
  const Var v = value(v_in);
  std::vector<Var> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = ad::slice(q, 1, h * head_width, head_width);
    const Var kh = ad::slice(k, 1, h * head_width, head_width);
    const Var vh = ad::slice(v, 1, h * head_width, head_width);
    const Var weights =
        ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt), 1);
    if (attention) attention->push_back(weights);
    head_outputs.push_back(ad::matmul(weights, vh));
  }
  const Var attended = out(heads == 1 ? head_outputs.front() : ad::concat(head_outputs, 1));
  const Var x = ad::layer_norm(ad::add(q_in, attended), norm1_gain, norm1_bias);
  const Var ff = ffn_out(ad::relu(ffn_in(x)));
  return ad::layer_norm(ad::add(x, ff), norm2_gain, norm2_bias);
}

Var transformer_encoder_layer(const Var& query, const Var& key, const Var& value,
                              const TransformerLayer& layer, std::vector<Var>* attention) {
  return layer(query, key, value, attention);
}

Tensor sample_gumbel(const Shape& shape, Rng& rng) {
  Tensor noise(shape);
  for (double& g : noise.data()) g = rng.gumbel();
  return noise;
}

Tensor one_hot_argmax(const Tensor& rows) {
  if (rows.rank() != 2) throw ShapeError("one_hot_argmax expects [n, k]");
  const std::size_t n = rows.dim(0), k = rows.dim(1);
  Tensor hard(rows.shape(), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (rows[r * k + j] > rows[r * k + best]) best = j;
    }
    hard[r * k + best] = 1.0;
  }
  return hard;
}

Var gumbel_softmax(const Var& logits, const Tensor& noise, double temperature, bool hard) {
  if (!(temperature > 0.0)) throw ConfigError("gumbel temperature must be positive");
  if (logits.shape().size() != 2) {
    throw ShapeError("gumbel_softmax expects [n, k] logits, got " +
                     shape_to_string(logits.shape()));
  }
  if (noise.shape() != logits.shape()) {
    throw ShapeError("gumbel noise shape " + shape_to_string(noise.shape()) +
                     " does not match logits " + shape_to_string(logits.shape()));
  }
  const Var soft = ad::softmax(
      ad::scale(ad::add(logits, Var::constant(noise)), 1.0 / temperature), 1);
  if (!hard) return soft;
  return ad::straight_through(one_hot_argmax(soft.value()), soft);
}

Var gumbel_softmax(const Var& logits, double temperature, bool hard, Rng* rng) {
  Tensor noise = rng ? sample_gumbel(logits.shape(), *rng) : Tensor(logits.shape(), 0.0);
  return gumbel_softmax(logits, noise, temperature, hard);
}

Var softmax_cross_entropy(const Var& logits, std::size_t target) {
  const std::size_t targets[] = {target};
  return ad::softmax_cross_entropy(logits, targets);
}

namespace {

double finite_or_throw(double v) {
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: function returned non-finite value");
  return v;
}

GradCheckResult compare_gradients(const ScalarFunction& function, std::vector<Var> inputs,
                                  double epsilon) {
  for (auto& x : inputs) {
    if (!x.requires_grad()) throw ConfigError("grad_check inputs must require grad");
    x.zero_grad();
  }
  {
    const Var y = function(inputs);
    finite_or_throw(y.item());
    ad::backward(y);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(inputs.size());
  for (auto& x : inputs) {
    analytic.push_back(x.grad());
    x.zero_grad();
  }

  GradCheckResult result;
  std::vector<Tensor> numerics;
  ad::NoGradGuard no_grad;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    Tensor& value = inputs[n].mutable_value();
    numerics.emplace_back(value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double original = value[i];
      auto central = [&](double step) {
        const double up = original + step;
        const double down = original - step;
        value[i] = up;
        const double plus = finite_or_throw(function(inputs).item());
        value[i] = down;
        const double minus = finite_or_throw(function(inputs).item());
        value[i] = original;
        // Divide by the step actually taken after rounding x +- step.
        return (plus - minus) / (up - down);
      };
      const double numeric = central(epsilon);
      numerics.back()[i] = numeric;
      const double a = analytic[n][i];
      const double err =
          std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      if (err > result.max_relative_error || (n == 0 && i == 0)) {
        result = {std::max(err, result.max_relative_error), n, i, a, numeric, {}, {}};
      }
    }
  }
  result.analytic_gradients = std::move(analytic);
  result.numeric_gradients = std::move(numerics);
  return result;
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& function, std::vector<Var> inputs,
                           double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("grad_check epsilon must be positive");
  return compare_gradients(function, std::move(inputs), epsilon);
}

}  // namespace va3::nn
