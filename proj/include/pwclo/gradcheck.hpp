#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pwclo/tensor.hpp"

namespace pwclo::ad {

struct GradCheckOptions {
  double step = 1e-5;
  /// Elements whose analytic gradient is below this magnitude are compared absolutely.
  double abs_floor = 1e-8;
  /// Upper bound on checked elements per input; 0 checks all of them.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;      ///< discrepancy beyond the rounding bound of the loss
  double max_raw_error = 0.0;  ///< plain relative discrepancy
  std::string worst_location;
  std::size_t checked = 0;
  std::size_t kinks = 0;  ///< elements where a one-sided slope matched better than the central one

  bool passed(double tolerance) const { return checked > 0 && max_error < tolerance; }
};

/// Mixed relative/absolute discrepancy used by every gradient comparison.
double gradient_discrepancy(double analytic, double numeric, double abs_floor);

using InputLoss = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Checks d loss / d inputs against central differences.
GradCheckResult check_input_gradients(const std::string& name, const InputLoss& loss, std::vector<Tensor> inputs,
                                      const GradCheckOptions& opts = {});

using ParameterLoss = std::function<Var(Tape&, const ParameterStore&)>;

/// Checks d loss / d parameters for the named entries of `store` (all trainable
/// ones when `names` is empty). `store` is perturbed in place and restored.
GradCheckResult check_parameter_gradients(const std::string& name, const ParameterLoss& loss, ParameterStore& store,
                                          std::vector<std::string> names = {}, const GradCheckOptions& opts = {});

}  // namespace pwclo::ad
