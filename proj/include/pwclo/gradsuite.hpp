#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pwclo/gradcheck.hpp"

namespace pwclo::gradsuite {

struct Check {
  std::string op;
  double tolerance = 1e-4;
  std::function<ad::GradCheckResult()> run;
};

struct SuiteOptions {
  std::uint64_t seed = 1;
  bool include_end_to_end = true;
  /// Adds an op whose backward pass is deliberately wrong, to exercise the harness.
  bool inject_broken = false;
};

/// Every differentiable operation, each checked against central differences.
std::vector<Check> default_suite(const SuiteOptions& opts = {});

struct Outcome {
  std::string op;
  double tolerance = 0;
  ad::GradCheckResult result;
  bool passed() const { return result.passed(tolerance); }
};

/// Runs the checks whose op matches `only` (all when empty).
std::vector<Outcome> run(const std::vector<Check>& checks, const std::string& only = {});

}  // namespace pwclo::gradsuite
