#include "pwclo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace pwclo::ad {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

// ---------------------------------------------------------------------------

Parameter& ParameterStore::add(const std::string& name, Tensor value, bool trainable) {
  auto [it, inserted] = params_.emplace(name, Parameter{std::move(value), trainable});
  if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
  return it->second;
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterStore::count_trainable() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("Var is not attached to a tape");
  return tape->value(id);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(const ParameterStore& store, const std::string& name) {
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var{this, it->second};
  const Parameter& p = store.get(name);
  Var v = p.trainable ? leaf(p.value) : constant(p.value);
  param_nodes_.emplace(name, v.id);
  return v;
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  bool needs = false;
  for (auto p : parents) {
    if (p >= nodes_.size()) throw std::logic_error("parent node does not precede child");
    needs = needs || nodes_[p].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::move(parents), needs ? std::move(backward) : nullptr, needs, {}, false});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (!n.has_grad) {
    // Unreached nodes report zeros of the value shape.
    auto& self = const_cast<Tape&>(*this);
    return self.grad_buffer(id);
  }
  return n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  if (buf.size() != g.size()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " vs value " + shape_str(buf.shape()));
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

GradientMap Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("root belongs to a different tape");
  if (nodes_[root.id].value.size() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " + shape_str(nodes_[root.id].value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (nodes_[root.id].requires_grad) {
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
  }
  GradientMap out;
  for (const auto& [name, id] : param_nodes_) {
    if (nodes_[id].requires_grad) out.emplace(name, grad(id));
  }
  return out;
}

GradientMap Tape::backward(Var root, const ParameterStore& store) {
  GradientMap out = backward(root);
  for (const auto& [name, p] : store) {
    if (p.trainable && !out.count(name)) out.emplace(name, Tensor(p.value.shape(), 0.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting.

namespace {

Tape* common_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw std::invalid_argument("operands belong to different tapes");
  return a.tape;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Maps a flat output index to the flat index of an operand.
struct IndexMap {
  enum class Mode { kIdentity, kModulo, kTable } mode = Mode::kIdentity;
  std::size_t modulo = 1;
  std::vector<std::size_t> table;

  std::size_t operator()(std::size_t i) const {
    switch (mode) {
      case Mode::kIdentity:
        return i;
      case Mode::kModulo:
        return i % modulo;
      case Mode::kTable:
        return table[i];
    }
    return i;
  }
};

IndexMap make_index_map(const Shape& out, const Shape& in) {
  IndexMap m;
  const std::size_t n_out = shape_numel(out);
  const std::size_t n_in = shape_numel(in);
  if (n_in == n_out) return m;
  // Operand equal to a trailing block of the output tiles with a modulo.
  bool suffix = true;
  {
    std::size_t k = in.size();
    std::size_t j = out.size();
    // strip leading ones of `in`
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    for (k = in.size(); k > lead; --k, --j) {
      if (in[k - 1] != out[j - 1]) {
        suffix = false;
        break;
      }
    }
  }
  if (suffix) {
    m.mode = IndexMap::Mode::kModulo;
    m.modulo = n_in;
    return m;
  }
  m.mode = IndexMap::Mode::kTable;
  m.table.resize(n_out);
  const std::size_t rank = out.size();
  const std::size_t off = rank - in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > off;) {
    const std::size_t d = in[i - off];
    in_stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n_out; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_stride[i];
    m.table[flat] = src;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return m;
}

double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// (outer, extent, inner) decomposition around an axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Var elementwise(Elementwise kind, Var a) {
  Tape* tape = a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  auto xs = x.data();
  auto ys = y.data();
  switch (kind) {
    case Elementwise::kRelu:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > 0.0 ? xs[i] : 0.0;
      break;
    case Elementwise::kExp:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::exp(xs[i]);
      break;
    case Elementwise::kNegate:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = -xs[i];
      break;
    case Elementwise::kAbs:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::fabs(xs[i]);
      break;
    default:
      throw std::invalid_argument("binary elementwise op called with one operand");
  }
  const std::size_t pa = a.id;
  return tape->record(std::move(y), {pa}, [kind, pa](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(pa);
    Tensor ga(xv.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      switch (kind) {
        case Elementwise::kRelu:
          ga[i] = g[i] * relu_grad(xv[i]);
          break;
        case Elementwise::kExp:
          ga[i] = g[i] * t.value(self)[i];
          break;
        case Elementwise::kNegate:
          ga[i] = -g[i];
          break;
        case Elementwise::kAbs:
          ga[i] = g[i] * sign_of(xv[i]);
          break;
        default:
          break;
      }
    }
    t.accumulate(pa, ga);
  });
}

Var elementwise(Elementwise kind, Var a, Var b) {
  Tape* tape = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Shape out_shape = broadcast_shape(x.shape(), z.shape());
  auto ma = std::make_shared<IndexMap>(make_index_map(out_shape, x.shape()));
  auto mb = std::make_shared<IndexMap>(make_index_map(out_shape, z.shape()));
  Tensor y(out_shape);
  const std::size_t n = y.size();
  const IndexMap& ia = *ma;
  const IndexMap& ib = *mb;
  switch (kind) {
    case Elementwise::kAdd:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[ia(i)] + z[ib(i)];
      break;
    case Elementwise::kSub:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[ia(i)] - z[ib(i)];
      break;
    case Elementwise::kMul:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[ia(i)] * z[ib(i)];
      break;
    case Elementwise::kDiv:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[ia(i)] / z[ib(i)];
      break;
    default:
      throw std::invalid_argument("unary elementwise op called with two operands");
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape->record(std::move(y), {pa, pb}, [kind, pa, pb, ma, mb](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(pa);
    const Tensor& zv = t.value(pb);
    const IndexMap& ia = *ma;
    const IndexMap& ib = *mb;
    const bool need_a = t.requires_grad(pa);
    const bool need_b = t.requires_grad(pb);
    Tensor ga(xv.shape()), gb(zv.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ja = ia(i), jb = ib(i);
      switch (kind) {
        case Elementwise::kAdd:
          ga[ja] += g[i];
          gb[jb] += g[i];
          break;
        case Elementwise::kSub:
          ga[ja] += g[i];
          gb[jb] -= g[i];
          break;
        case Elementwise::kMul:
          ga[ja] += g[i] * zv[jb];
          gb[jb] += g[i] * xv[ja];
          break;
        case Elementwise::kDiv:
          ga[ja] += g[i] / zv[jb];
          gb[jb] -= g[i] * xv[ja] / (zv[jb] * zv[jb]);
          break;
        default:
          break;
      }
    }
    if (need_a) t.accumulate(pa, ga);
    if (need_b) t.accumulate(pb, gb);
  });
}

Var scale(Var a, double factor) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * factor;
    t.accumulate(pa, ga);
  });
}

// ---------------------------------------------------------------------------

namespace {

struct MatmulDims {
  std::size_t batch_a, batch_b, batch, m, k, n;
  bool batched_out;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if ((a.size() != 2 && a.size() != 3) || (b.size() != 2 && b.size() != 3)) {
    throw ShapeError("matmul expects rank-2 or rank-3 operands, got " + shape_str(a) + " and " + shape_str(b));
  }
  MatmulDims d{};
  d.batch_a = a.size() == 3 ? a[0] : 1;
  d.batch_b = b.size() == 3 ? b[0] : 1;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  const std::size_t kb = b[b.size() - 2];
  d.n = b[b.size() - 1];
  if (d.k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a) + " x " + shape_str(b));
  }
  if (d.batch_a != d.batch_b && d.batch_a != 1 && d.batch_b != 1) {
    throw ShapeError("matmul batch dimensions differ: " + shape_str(a) + " x " + shape_str(b));
  }
  d.batch = std::max(d.batch_a, d.batch_b);
  d.batched_out = a.size() == 3 || b.size() == 3;
  return d;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// c[m,k] += g[m,n] * b[k,n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, K).noalias() += ConstMap(g, M, N) * ConstMap(b, K, N).transpose();
}

// c[k,n] += a[m,k]^T * g[m,n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, K, N).noalias() += ConstMap(a, M, K).transpose() * ConstMap(g, M, N);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape* tape = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  const MatmulDims d = matmul_dims(x.shape(), z.shape());
  Shape out_shape = d.batched_out ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
  Tensor y(out_shape);
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* ap = x.data().data() + (d.batch_a == 1 ? 0 : bi * d.m * d.k);
    const double* bp = z.data().data() + (d.batch_b == 1 ? 0 : bi * d.k * d.n);
    gemm_nn(ap, bp, y.data().data() + bi * d.m * d.n, d.m, d.k, d.n);
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape->record(std::move(y), {pa, pb}, [pa, pb, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(pa);
    const Tensor& zv = t.value(pb);
    if (t.requires_grad(pa)) {
      Tensor ga(xv.shape());
      for (std::size_t bi = 0; bi < d.batch; ++bi) {
        const double* gp = g.data().data() + bi * d.m * d.n;
        const double* bp = zv.data().data() + (d.batch_b == 1 ? 0 : bi * d.k * d.n);
        double* out = ga.data().data() + (d.batch_a == 1 ? 0 : bi * d.m * d.k);
        gemm_nt(gp, bp, out, d.m, d.n, d.k);
      }
      t.accumulate(pa, ga);
    }
    if (t.requires_grad(pb)) {
      Tensor gb(zv.shape());
      for (std::size_t bi = 0; bi < d.batch; ++bi) {
        const double* gp = g.data().data() + bi * d.m * d.n;
        const double* ap = xv.data().data() + (d.batch_a == 1 ? 0 : bi * d.m * d.k);
        double* out = gb.data().data() + (d.batch_b == 1 ? 0 : bi * d.k * d.n);
        gemm_tn(ap, gp, out, d.m, d.k, d.n);
      }
      t.accumulate(pb, gb);
    }
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor y(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor ga(Shape{r, c});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
    t.accumulate(pa, ga);
  });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa](Tape& t, std::size_t self) {
    t.accumulate(pa, t.grad(self).reshaped(t.value(pa).shape()));
  });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = x[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, x[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(x[base + e * s.inner] - mx);
        y[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] /= total;
    }
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& yv = t.value(self);
    Tensor ga(yv.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * yv[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t i = base + e * s.inner;
          ga[i] = yv[i] * (g[i] - dot);
        }
      }
    }
    t.accumulate(pa, ga);
  });
}

Var reduce(Reduce kind, Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.extent == 0) throw ShapeError("reduction over empty axis of shape " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor y(out_shape);
  std::shared_ptr<std::vector<std::size_t>> argmax;
  if (kind == Reduce::kMax) argmax = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      const std::size_t out = o * s.inner + in;
      if (kind == Reduce::kSum) {
        double acc = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) acc += x[base + e * s.inner];
        y[out] = acc;
      } else {
        std::size_t best = 0;
        for (std::size_t e = 1; e < s.extent; ++e) {
          if (x[base + e * s.inner] > x[base + best * s.inner]) best = e;
        }
        y[out] = x[base + best * s.inner];
        (*argmax)[out] = best;
      }
    }
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, s, kind, argmax](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor ga(t.value(pa).shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        const std::size_t out = o * s.inner + in;
        if (kind == Reduce::kSum) {
          for (std::size_t e = 0; e < s.extent; ++e) ga[base + e * s.inner] = g[out];
        } else {
          ga[base + (*argmax)[out] * s.inner] = g[out];
        }
      }
    }
    t.accumulate(pa, ga);
  });
}

Var sum_all(Var a) {
  const Tensor& x = a.value();
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const std::size_t pa = a.id;
  return a.tape->record(Tensor::scalar(acc), {pa}, [pa](Tape& t, std::size_t self) {
    t.accumulate(pa, Tensor(t.value(pa).shape(), t.grad(self)[0]));
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape* tape = parts.front().tape;
  Shape out_shape = parts.front().value().shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range for " + shape_str(out_shape));
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape != tape) throw std::invalid_argument("concat operands belong to different tapes");
    const Shape& sh = p.value().shape();
    bool ok = sh.size() == out_shape.size();
    for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = i == axis || sh[i] == out_shape[i];
    if (!ok) {
      throw ShapeError("concat shapes incompatible: " + shape_str(out_shape) + " and " + shape_str(sh) +
                       " on axis " + std::to_string(axis));
    }
    extents.push_back(sh[axis]);
    total += sh[axis];
  }
  out_shape[axis] = total;
  AxisSplit s = split_axis(out_shape, axis);
  Tensor y(out_shape);
  std::vector<std::size_t> ids;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    const std::size_t ext = extents[p];
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = x.data().data() + o * ext * s.inner;
      double* dst = y.data().data() + (o * total + offset) * s.inner;
      std::copy(src, src + ext * s.inner, dst);
    }
    offset += ext;
    ids.push_back(parts[p].id);
  }
  return tape->record(std::move(y), ids, [ids, extents, s, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t ext = extents[p];
      if (t.requires_grad(ids[p])) {
        Tensor gp(t.value(ids[p]).shape());
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = g.data().data() + (o * total + offset) * s.inner;
          std::copy(src, src + ext * s.inner, gp.data().data() + o * ext * s.inner);
        }
        t.accumulate(ids[p], gp);
      }
      offset += ext;
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  if (begin > end || end > s.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  Tensor y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = x.data().data() + (o * s.extent + begin) * s.inner;
    std::copy(src, src + ext * s.inner, y.data().data() + o * ext * s.inner);
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, s, begin, ext](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor ga(t.value(pa).shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = g.data().data() + o * ext * s.inner;
      std::copy(src, src + ext * s.inner, ga.data().data() + (o * s.extent + begin) * s.inner);
    }
    t.accumulate(pa, ga);
  });
}

Var gather_rows(Var a, std::span<const std::size_t> indices) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("gather_rows on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows == 0 ? 0 : x.size() / rows;
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw std::out_of_range("gather index " + std::to_string(idx) + " out of bounds for " +
                              std::to_string(rows) + " rows");
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  Tensor y(out_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* src = x.data().data() + indices[i] * width;
    std::copy(src, src + width, y.data().data() + i * width);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, idx, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const double* src = g.data().data() + i * width;
      double* dst = ga.data().data() + (*idx)[i] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

Var repeat_rows(Var a, std::size_t times) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("repeat_rows on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows == 0 ? 0 : x.size() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = rows * times;
  Tensor y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * width;
    for (std::size_t k = 0; k < times; ++k) std::copy(src, src + width, y.data().data() + (r * times + k) * width);
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, rows, width, times](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor ga(t.value(pa).shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t j = 0; j < width; ++j) ga[r * width + j] += g[(r * times + k) * width + j];
    t.accumulate(pa, ga);
  });
}

Var norm_rows(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("norm_rows on a scalar");
  const std::size_t width = x.shape().back();
  const std::size_t rows = width == 0 ? 0 : x.size() / width;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  Tensor y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < width; ++j) acc += x[r * width + j] * x[r * width + j];
    y[r] = std::sqrt(acc);
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(y), {pa}, [pa, rows, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& yv = t.value(self);
    const Tensor& xv = t.value(pa);
    Tensor ga(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      if (yv[r] == 0.0) continue;
      for (std::size_t j = 0; j < width; ++j) ga[r * width + j] = g[r] * xv[r * width + j] / yv[r];
    }
    t.accumulate(pa, ga);
  });
}

Var quat_mul(Var a, Var b) {
  Tape* tape = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (x.shape() != z.shape() || x.rank() == 0 || x.shape().back() != 4) {
    throw ShapeError("quat_mul expects equal (..,4) shapes, got " + shape_str(x.shape()) + " and " +
                     shape_str(z.shape()));
  }
  const std::size_t rows = x.size() / 4;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.data().data() + 4 * r;
    const double* q = z.data().data() + 4 * r;
    double* o = y.data().data() + 4 * r;
    o[0] = p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3];
    o[1] = p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2];
    o[2] = p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1];
    o[3] = p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0];
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape->record(std::move(y), {pa, pb}, [pa, pb, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(pa);
    const Tensor& zv = t.value(pb);
    Tensor ga(xv.shape()), gb(zv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = xv.data().data() + 4 * r;
      const double* q = zv.data().data() + 4 * r;
      const double* d = g.data().data() + 4 * r;
      double* da = ga.data().data() + 4 * r;
      double* db = gb.data().data() + 4 * r;
      da[0] = d[0] * q[0] + d[1] * q[1] + d[2] * q[2] + d[3] * q[3];
      da[1] = -d[0] * q[1] + d[1] * q[0] - d[2] * q[3] + d[3] * q[2];
      da[2] = -d[0] * q[2] + d[1] * q[3] + d[2] * q[0] - d[3] * q[1];
      da[3] = -d[0] * q[3] - d[1] * q[2] + d[2] * q[1] + d[3] * q[0];
      db[0] = d[0] * p[0] + d[1] * p[1] + d[2] * p[2] + d[3] * p[3];
      db[1] = -d[0] * p[1] + d[1] * p[0] + d[2] * p[3] - d[3] * p[2];
      db[2] = -d[0] * p[2] - d[1] * p[3] + d[2] * p[0] + d[3] * p[1];
      db[3] = -d[0] * p[3] + d[1] * p[2] - d[2] * p[1] + d[3] * p[0];
    }
    t.accumulate(pa, ga);
    t.accumulate(pb, gb);
  });
}

Var quat_to_rotmat(Var q) {
  const Tensor& x = q.value();
  if (x.size() != 4) throw ShapeError("quat_to_rotmat expects 4 values, got shape " + shape_str(x.shape()));
  const double norm = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]);
  if (norm == 0.0 || !std::isfinite(norm)) throw std::domain_error("quaternion has zero or non-finite norm");
  const double w = x[0] / norm, i = x[1] / norm, j = x[2] / norm, k = x[3] / norm;
  Tensor r(Shape{3, 3},
           {1 - 2 * (j * j + k * k), 2 * (i * j - w * k), 2 * (i * k + w * j),  //
            2 * (i * j + w * k), 1 - 2 * (i * i + k * k), 2 * (j * k - w * i),  //
            2 * (i * k - w * j), 2 * (j * k + w * i), 1 - 2 * (i * i + j * j)});
  const std::size_t pa = q.id;
  return q.tape->record(std::move(r), {pa}, [pa](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(pa);
    const double n = std::sqrt(xv[0] * xv[0] + xv[1] * xv[1] + xv[2] * xv[2] + xv[3] * xv[3]);
    const double w = xv[0] / n, i = xv[1] / n, j = xv[2] / n, k = xv[3] / n;
    // d(sum g*R)/d(unit quaternion)
    double gw = 0, gi = 0, gj = 0, gk = 0;
    gj += g[0] * (-4 * j);
    gk += g[0] * (-4 * k);
    gi += g[1] * 2 * j, gj += g[1] * 2 * i, gw += g[1] * (-2 * k), gk += g[1] * (-2 * w);
    gi += g[2] * 2 * k, gk += g[2] * 2 * i, gw += g[2] * 2 * j, gj += g[2] * 2 * w;
    gi += g[3] * 2 * j, gj += g[3] * 2 * i, gw += g[3] * 2 * k, gk += g[3] * 2 * w;
    gi += g[4] * (-4 * i);
    gk += g[4] * (-4 * k);
    gj += g[5] * 2 * k, gk += g[5] * 2 * j, gw += g[5] * (-2 * i), gi += g[5] * (-2 * w);
    gi += g[6] * 2 * k, gk += g[6] * 2 * i, gw += g[6] * (-2 * j), gj += g[6] * (-2 * w);
    gj += g[7] * 2 * k, gk += g[7] * 2 * j, gw += g[7] * 2 * i, gi += g[7] * 2 * w;
    gi += g[8] * (-4 * i);
    gj += g[8] * (-4 * j);
    // project through the normalization
    const double dot = gw * w + gi * i + gj * j + gk * k;
    Tensor ga(xv.shape());
    ga[0] = (gw - w * dot) / n;
    ga[1] = (gi - i * dot) / n;
    ga[2] = (gj - j * dot) / n;
    ga[3] = (gk - k * dot) / n;
    t.accumulate(pa, ga);
  });
}

}  // namespace pwclo::ad
