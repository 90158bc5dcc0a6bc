#pragma once

#include <functional>
#include <string>
#include <vector>

#include "va3/autodiff.hpp"
#include "va3/params.hpp"
#include "va3/random.hpp"

namespace va3::nn {

struct Linear {
  ad::Var weight;  // [in, out]
  ad::Var bias;    // [out]

  static Linear create(ParamStore& params, const std::string& name, std::size_t in,
                       std::size_t out);
  ad::Var operator()(const ad::Var& x) const;  // x: [n, in] -> [n, out]
};

// Linear -> ReLU -> Linear.
struct Mlp {
  Linear hidden;
  Linear output;

  static Mlp create(ParamStore& params, const std::string& name, std::size_t in,
                    std::size_t hidden, std::size_t out);
  ad::Var operator()(const ad::Var& x) const;
};

/// Post-norm transformer encoder layer used for cross-attention.
///
/// Multi-head scaled dot-product attention from query rows onto key/value
/// rows, residual add and layer norm, then a position-wise ReLU
/// feed-forward block with residual add and layer norm.
struct TransformerLayer {
  std::size_t width = 0;
  std::size_t heads = 0;
  Linear query, key, value, out;
  ad::Var norm1_gain, norm1_bias;
  Linear ffn_in, ffn_out;
  ad::Var norm2_gain, norm2_bias;

  static TransformerLayer create(ParamStore& params, const std::string& name,
                                 std::size_t width, std::size_t heads = 4,
                                 std::size_t ffn_multiplier = 4);

  // query [n, h], key/value [m, h] -> [n, h]. When `attention` is non-null it
  // receives one [n, m] weight matrix per head.
  ad::Var operator()(const ad::Var& query, const ad::Var& key, const ad::Var& value,
                     std::vector<ad::Var>* attention = nullptr) const;
};

ad::Var transformer_encoder_layer(const ad::Var& query, const ad::Var& key,
                                  const ad::Var& value, const TransformerLayer& layer,
                                  std::vector<ad::Var>* attention = nullptr);

Tensor sample_gumbel(const Shape& shape, Rng& rng);

// Row-wise Gumbel-softmax over [n, k] logits with explicit noise. In hard
// mode the forward value is the exact one-hot argmax of the soft sample and
// the gradient flows through the soft sample.
ad::Var gumbel_softmax(const ad::Var& logits, const Tensor& noise, double temperature,
                       bool hard);
// Draws the noise from `rng`; a null `rng` means zero noise.
ad::Var gumbel_softmax(const ad::Var& logits, double temperature, bool hard, Rng* rng);

Tensor one_hot_argmax(const Tensor& rows);

// -log softmax(logits)[target] for a single [k] logit vector.
ad::Var softmax_cross_entropy(const ad::Var& logits, std::size_t target);

using ScalarFunction = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  // Per input, same shapes as the inputs.
  std::vector<Tensor> analytic_gradients;
  std::vector<Tensor> numeric_gradients;
};

// Central differences against reverse-mode gradients for every coordinate
// of every input. Per coordinate error is |a - n| / max(|a|, |n|, 1e-8).
// Inputs are restored afterwards; their accumulated grads are cleared.
GradCheckResult grad_check(const ScalarFunction& function, std::vector<ad::Var> inputs,
                           double epsilon = 1e-5);


}  // namespace va3::nn
