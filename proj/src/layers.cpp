#include "pwclo/layers.hpp"

#include <cmath>

namespace pwclo {

Mlp::Mlp(std::string prefix, std::size_t in_width, std::vector<std::size_t> widths, bool activate_last)
    : prefix_(std::move(prefix)), in_width_(in_width), widths_(std::move(widths)), activate_last_(activate_last) {}

std::string Mlp::weight_name(std::size_t layer) const { return prefix_ + "/w" + std::to_string(layer); }
std::string Mlp::bias_name(std::size_t layer) const { return prefix_ + "/b" + std::to_string(layer); }

void Mlp::init(ad::ParameterStore& store, std::mt19937_64& rng) const {
  std::size_t in = in_width_;
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    const std::size_t out = widths_[l];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(in, 1))));
    ad::Tensor w(ad::Shape{in, out});
    for (double& v : w.data()) v = dist(rng);
    store.add(weight_name(l), std::move(w));
    store.add(bias_name(l), ad::Tensor(ad::Shape{out}, 0.0));
    in = out;
  }
}

void Mlp::validate(const ad::ParameterStore& store) const {
  std::size_t in = in_width_;
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    const ad::Shape want_w{in, widths_[l]};
    const ad::Shape want_b{widths_[l]};
    for (const auto& [name, want] : {std::pair{weight_name(l), want_w}, std::pair{bias_name(l), want_b}}) {
      if (!store.contains(name)) throw ad::ShapeError("missing parameter " + name);
      const auto& got = store.get(name).value.shape();
      if (got != want) {
        throw ad::ShapeError("parameter " + name + " has shape " + ad::shape_str(got) + ", expected " +
                             ad::shape_str(want));
      }
    }
    in = widths_[l];
  }
}

ad::Var Mlp::apply(ad::Tape& tape, const ad::ParameterStore& store, ad::Var x) const {
  if (x.value().rank() != 2 || x.dim(1) != in_width_) {
    throw ad::ShapeError(prefix_ + ": input shape " + ad::shape_str(x.shape()) + " does not match width " +
                         std::to_string(in_width_));
  }
  ad::Var h = x;
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    h = ad::add(ad::matmul(h, tape.parameter(store, weight_name(l))), tape.parameter(store, bias_name(l)));
    if (l + 1 < widths_.size() || activate_last_) h = ad::relu(h);
  }
  return h;
}

}  // namespace pwclo
