#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pwclo::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  /// Value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Parameter {
  Tensor value;
  bool trainable = true;
};

/// Named parameters, iterated in name order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Total number of trainable scalars.
  std::size_t count_trainable() const;

 private:
  std::map<std::string, Parameter> params_;
};

using GradientMap = std::map<std::string, Tensor>;

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
};

/// Reverse-mode differentiation tape. Single writer; one tape per thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  /// Records a parameter from `store`; trainable parameters receive gradients.
  Var parameter(const ParameterStore& store, const std::string& name);

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node; valid after backward. Zero if unreached.
  const Tensor& grad(std::size_t id) const;
  const Tensor& grad(Var v) const { return grad(v.id); }

  /// Adds `g` into the gradient buffer of node `id` (used by backward closures).
  void accumulate(std::size_t id, const Tensor& g);
  /// Mutable gradient buffer, allocated on first use.
  Tensor& grad_buffer(std::size_t id);

  /// Backpropagates from a scalar root. Returns leaf gradients for every
  /// parameter drawn onto this tape.
  GradientMap backward(Var root);
  /// As above, but reports every trainable parameter of `store`; those the
  /// root does not depend on get zero gradients.
  GradientMap backward(Var root, const ParameterStore& store);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor grad;
    bool has_grad = false;
  };
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
  Tensor empty_;
};

// ---------------------------------------------------------------------------
// Operators. Binary elementwise ops broadcast along trailing dimensions.

enum class Elementwise { kAdd, kSub, kMul, kDiv, kRelu, kExp, kNegate, kAbs };

Var elementwise(Elementwise kind, Var a);
Var elementwise(Elementwise kind, Var a, Var b);

inline Var add(Var a, Var b) { return elementwise(Elementwise::kAdd, a, b); }
inline Var sub(Var a, Var b) { return elementwise(Elementwise::kSub, a, b); }
inline Var mul(Var a, Var b) { return elementwise(Elementwise::kMul, a, b); }
inline Var div(Var a, Var b) { return elementwise(Elementwise::kDiv, a, b); }
inline Var relu(Var a) { return elementwise(Elementwise::kRelu, a); }
inline Var exp(Var a) { return elementwise(Elementwise::kExp, a); }
inline Var neg(Var a) { return elementwise(Elementwise::kNegate, a); }
inline Var abs(Var a) { return elementwise(Elementwise::kAbs, a); }
Var scale(Var a, double factor);

/// Rank-2 or batched rank-3 product. A rank-2 operand broadcasts over the batch.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var softmax(Var a, std::size_t axis);

enum class Reduce { kSum, kMax };
/// Reduces `axis` away. Max routes gradient to the first maximal element.
Var reduce(Reduce kind, Var a, std::size_t axis);
inline Var sum(Var a, std::size_t axis) { return reduce(Reduce::kSum, a, axis); }
inline Var max(Var a, std::size_t axis) { return reduce(Reduce::kMax, a, axis); }
/// Sum of every element, as a scalar.
Var sum_all(Var a);

Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
/// Output row i is input row indices[i]; gradient scatter-adds.
Var gather_rows(Var a, std::span<const std::size_t> indices);
/// Repeats every row `times` consecutively: row r -> rows r*times..r*times+times-1.
Var repeat_rows(Var a, std::size_t times);

/// L2 norm over the last axis, keeping it as width 1. Gradient is 0 at a zero row.
Var norm_rows(Var a);

/// Hamilton product of (..,4) quaternions, scalar first, row-wise.
Var quat_mul(Var a, Var b);
/// Rotation matrix (3x3) of a single quaternion (1x4 or 4), normalized internally.
Var quat_to_rotmat(Var q);

// ---------------------------------------------------------------------------
// Parameter checkpoint files.

/// Writes `store` in the checkpoint format: a text header, then per parameter
/// a text line (name, trainable flag, shape) followed by little-endian doubles.
void write_parameters(std::ostream& out, const ParameterStore& store);
ParameterStore read_parameters(std::istream& in);
void save_parameters(const std::string& path, const ParameterStore& store);
ParameterStore load_parameters(const std::string& path);

}  // namespace pwclo::ad
