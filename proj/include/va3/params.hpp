#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "va3/autodiff.hpp"

namespace va3 {

/// Named trainable tensors with seed-determined initialization.
///
/// Each tensor draws from its own stream derived from (seed, name), so
/// the value of a parameter does not depend on registration order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  // Uniform(-1/sqrt(in), 1/sqrt(in)) matrix of shape [in, out].
  ad::Var weight(const std::string& name, std::size_t in, std::size_t out);
  ad::Var zeros(const std::string& name, Shape shape);
  ad::Var ones(const std::string& name, Shape shape);
  ad::Var add(const std::string& name, Tensor value);

  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.contains(name); }
  const std::map<std::string, ad::Var>& params() const { return params_; }
  std::size_t parameter_count() const;

  std::uint64_t seed() const { return seed_; }
  void zero_grad();

  // Current values keyed by name.
  std::map<std::string, Tensor> snapshot() const;
  // Overwrites values in place; every stored name must be present with the
  // same shape.
  void load(const std::map<std::string, Tensor>& values);

 private:
  std::uint64_t seed_;
  std::map<std::string, ad::Var> params_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Uses the gradients accumulated on each parameter.
  void step(ParamStore& params);
  // Explicit gradients; every name must exist with a matching shape.
  void step(ParamStore& params, const std::map<std::string, Tensor>& grads);

  std::int64_t iteration() const { return iteration_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::int64_t iteration_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// Flat little-endian f64 payload at `<prefix>.bin` plus `<prefix>.json`
// manifest listing {name, shape, offset} with byte offsets.
void save_tensors(const std::string& prefix, const std::map<std::string, Tensor>& tensors,
                  std::uint64_t seed = 0);
std::map<std::string, Tensor> load_tensors(const std::string& prefix);

}  // namespace va3
