#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "va3/autodiff.hpp"
#include "va3/nn.hpp"
#include "va3/params.hpp"

namespace va3 {

// True for parameters that add the same constant to every logit of a
// softmax group (attention key biases, pooling score biases) or translate
// every edge vector alike (edge bias, seen only through distances). Their
// gradient is identically zero, so relative finite-difference error on
// them only measures roundoff.
bool shift_invariant_parameter(const std::string& name);

// Every parameter of `params` except the shift-invariant ones, in name order.
std::vector<ad::Var> checkable_parameters(const ParamStore& params);

// Coordinates of a grad_check run with |a - n| > relative * max(|a|, |n|) +
// absolute. An absolute allowance near the central-difference roundoff level
// separates real gradient bugs from noise on near-zero coordinates.
std::size_t coordinates_beyond(const nn::GradCheckResult& result, double relative,
                               double absolute);
std::size_t coordinate_count(const nn::GradCheckResult& result);

inline constexpr double kGradRelativeTolerance = 1e-4;
inline constexpr double kGradRoundoffAllowance = 1e-9;

struct OpGradCheck {
  std::string module;  // autodiff, aligner or aggregator
  std::string op;
  std::size_t instances = 0;
  std::size_t coordinates = 0;   // summed over instances
  double max_relative_error = 0;  // worst over instances and coordinates
  // Coordinates outside kGradRelativeTolerance * max(|a|, |n|) + kGradRoundoffAllowance.
  std::size_t beyond_roundoff = 0;
  std::string worst;  // parameter name or input slot of the worst coordinate

  bool passed() const { return max_relative_error < kGradRelativeTolerance; }
  bool agrees_beyond_roundoff() const { return beyond_roundoff == 0; }
};

// Names accepted by run_grad_suite besides "all".
std::vector<std::string> grad_suite_modules();

// Central-difference checks of every composite operation of `module` on
// `instances` seeded random instances each. ConfigError on an unknown module.
std::vector<OpGradCheck> run_grad_suite(const std::string& module = "all",
                                        std::size_t instances = 3);

}  // namespace va3
