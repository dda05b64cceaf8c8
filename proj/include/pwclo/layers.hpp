#pragma once

#include <random>
#include <string>
#include <vector>

#include "pwclo/tensor.hpp"

namespace pwclo {

/// Stack of per-row linear layers (a 1x1 convolution over points). Every layer
/// is followed by ReLU except, optionally, the last one.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, std::size_t in_width, std::vector<std::size_t> widths, bool activate_last = true);

  const std::string& prefix() const { return prefix_; }
  std::size_t in_width() const { return in_width_; }
  std::size_t out_width() const { return widths_.empty() ? in_width_ : widths_.back(); }
  std::size_t depth() const { return widths_.size(); }

  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;

  /// Registers He-initialized weights and zero biases.
  void init(ad::ParameterStore& store, std::mt19937_64& rng) const;
  /// Throws ShapeError if `store` lacks a layer or holds the wrong shape.
  void validate(const ad::ParameterStore& store) const;

  /// x: (rows, in_width) -> (rows, out_width).
  ad::Var apply(ad::Tape& tape, const ad::ParameterStore& store, ad::Var x) const;

 private:
  std::string prefix_;
  std::size_t in_width_ = 0;
  std::vector<std::size_t> widths_;
  bool activate_last_ = true;
};

}  // namespace pwclo
