#include "pwclo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <sstream>

namespace pwclo::ad {

double gradient_discrepancy(double analytic, double numeric, double abs_floor) {
  const double diff = std::fabs(analytic - numeric);
  if (std::fabs(analytic) < abs_floor) return diff;
  return diff / std::max(std::fabs(analytic), std::fabs(numeric));
}

namespace {

std::vector<std::size_t> pick_elements(std::size_t n, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit == 0 || limit >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Loss values at x - h, x and x + h.
struct Stencil {
  double down, mid, up;
};

void record(GradCheckResult& r, double analytic, const Stencil& s, const GradCheckOptions& opts,
            const std::string& where) {
  const double h = opts.step;
  // Rounding in the loss values bounds how well any difference quotient can
  // resolve a slope; discrepancies below it carry no information.
  const double scale = std::max({std::fabs(s.down), std::fabs(s.mid), std::fabs(s.up)});
  const double noise = 4.0 * std::numeric_limits<double>::epsilon() * scale / h;
  auto discrepancy = [&](double numeric) {
    const double diff = std::max(0.0, std::fabs(analytic - numeric) - noise);
    if (std::fabs(analytic) < opts.abs_floor) return diff;
    return diff / std::max(std::fabs(analytic), std::fabs(numeric));
  };
  double numeric = (s.up - s.down) / (2.0 * h);
  double err = discrepancy(numeric);
  // A kink inside the stencil makes the central difference mix two slopes;
  // the analytic value must then match the one-sided slope on its own side.
  // Away from kinks the central difference is the more accurate of the three,
  // so a one-sided slope only counts when it agrees an order of magnitude better.
  const double fwd = (s.up - s.mid) / h, bwd = (s.mid - s.down) / h;
  const double ef = discrepancy(fwd), eb = discrepancy(bwd);
  if (10.0 * std::min(ef, eb) < err) {
    numeric = ef < eb ? fwd : bwd;
    err = std::min(ef, eb);
    ++r.kinks;
  }
  if (!std::isfinite(analytic) || !std::isfinite(numeric)) err = INFINITY;
  r.max_raw_error = std::max(r.max_raw_error, gradient_discrepancy(analytic, numeric, opts.abs_floor));
  ++r.checked;
  if (err >= r.max_error) {
    r.max_error = err;
    std::ostringstream os;
    os << where << " (analytic " << analytic << ", numeric " << numeric << ")";
    r.worst_location = os.str();
  }
}

}  // namespace

GradCheckResult check_input_gradients(const std::string& name, const InputLoss& loss, std::vector<Tensor> inputs,
                                      const GradCheckOptions& opts) {
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    Var out = loss(tape, vars);
    const double value = out.value().item();
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (const Var& v : vars) grads->push_back(tape.grad(v));
    }
    return value;
  };

  GradCheckResult result;
  result.name = name;
  std::vector<Tensor> analytic;
  const double mid = evaluate(inputs, &analytic);
  std::mt19937_64 rng(opts.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i : pick_elements(inputs[k].size(), opts.max_elements, rng)) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + opts.step;
      const double up = evaluate(inputs, nullptr);
      inputs[k][i] = orig - opts.step;
      const double down = evaluate(inputs, nullptr);
      inputs[k][i] = orig;
      record(result, analytic[k][i], {down, mid, up}, opts,
             "input " + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  return result;
}

GradCheckResult check_parameter_gradients(const std::string& name, const ParameterLoss& loss, ParameterStore& store,
                                          std::vector<std::string> names, const GradCheckOptions& opts) {
  if (names.empty()) {
    for (const auto& [n, p] : store) {
      if (p.trainable) names.push_back(n);
    }
  }
  GradientMap analytic;
  double mid = 0;
  {
    Tape tape;
    Var out = loss(tape, store);
    mid = out.value().item();
    analytic = tape.backward(out, store);
  }
  auto evaluate = [&]() {
    Tape tape;
    return loss(tape, store).value().item();
  };

  GradCheckResult result;
  result.name = name;
  std::mt19937_64 rng(opts.seed);
  for (const auto& pname : names) {
    Tensor& value = store.get(pname).value;
    const Tensor& grad = analytic.at(pname);
    for (std::size_t i : pick_elements(value.size(), opts.max_elements, rng)) {
      const double orig = value[i];
      value[i] = orig + opts.step;
      const double up = evaluate();
      value[i] = orig - opts.step;
      const double down = evaluate();
      value[i] = orig;
      record(result, grad[i], {down, mid, up}, opts, pname + "[" + std::to_string(i) + "]");
    }
  }
  return result;
}

}  // namespace pwclo::ad
