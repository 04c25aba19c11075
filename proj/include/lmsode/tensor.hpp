#pragma once

// Dense float64 tensors with an explicit reverse-mode gradient tape.
//
// A Tensor is an immutable value: shape plus shared row-major storage. When
// any operand of a primitive lives on a Tape, the result is recorded on that
// same tape; otherwise the primitive only computes values. Both paths run the
// same kernels, so taped and untaped forward values are bit-identical.
//
// Tensors have rank 0, 1 or 2. Rank-1 tensors act as row vectors in matmul.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lmsode/errors.hpp"

namespace lmsode {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tape;

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_.size() > 2) throw ShapeError("tensor rank > 2 is not supported: " + shape_str(shape_));
    if (data.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape_));
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor(Shape{r, c}, std::move(v));
  }
  static Tensor filled(Shape s, double v) {
    const auto n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape s) { return filled(std::move(s), 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  // Matrix view: rank 0 -> 1x1, rank 1 -> 1xn.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }
  std::vector<double> to_vector() const { return *data_; }

  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }
  // Same values, no tape association.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

enum class Op {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Relu,
  Exp,
  Log,
  Square,
  Sum,
  SumLast,
  Mean,
  Concat,
  Slice,
  GatherRows,
  Softmax,
  AddBias,
  Reshape,
};

class Gradients;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Register a differentiable input.
  Tensor leaf(const Tensor& value) {
    Node n;
    n.op = Op::Leaf;
    n.needs_grad = true;
    return push(std::move(n), value);
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Gradient of a scalar loss w.r.t. every node; consumes the tape.
  Gradients backward(const Tensor& loss);

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<int> in;
    bool needs_grad = false;
    bool trans_a = false, trans_b = false;
    double scalar = 0.0;
    std::size_t axis = 0, begin = 0, end = 0;
    std::vector<std::size_t> index;
    Shape shape;
    std::shared_ptr<const std::vector<double>> value;
  };

  Tensor push(Node n, const Tensor& value) {
    if (consumed_) throw ContractError("recording on a consumed tape");
    n.shape = value.shape_;
    n.value = value.data_;
    nodes_.push_back(std::move(n));
    Tensor t = value;
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size()) - 1;
    return t;
  }

  int node_of(const Tensor& t) {
    if (t.tape_ == this) return t.node_;
    Node n;
    n.op = Op::Constant;
    return push(std::move(n), t.detached()).node_;
  }

  friend struct TapeAccess;
  friend class Gradients;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

class Gradients {
 public:
  // Gradient w.r.t. a tensor recorded on the tape (zeros if unreachable).
  Tensor wrt(const Tensor& t) const {
    if (t.tape() != tape_) throw ContractError("gradient requested for a tensor from another tape");
    const auto& g = grads_[static_cast<std::size_t>(t.node())];
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), g);
  }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

namespace kernel {

// C[m x n] (+)= op(A) * op(B), op = optional transpose; all row-major.
inline void matmul(std::span<const double> a, std::size_t ar, std::size_t ac, bool ta,
                   std::span<const double> b, std::size_t br, std::size_t bc, bool tb,
                   std::span<double> c, bool accumulate = false) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto ix = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const CMap A(a.data(), ix(ar), ix(ac));
  const CMap B(b.data(), ix(br), ix(bc));
  Eigen::Map<Mat> C(c.data(), ix(ta ? ac : ar), ix(tb ? br : bc));
  if (accumulate) {
    if (!ta && !tb) C.noalias() += A * B;
    else if (ta && !tb) C.noalias() += A.transpose() * B;
    else if (!ta) C.noalias() += A * B.transpose();
    else C.noalias() += A.transpose() * B.transpose();
  } else {
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

}  // namespace kernel

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape && tape != t->tape()) throw ContractError("operands belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace detail

struct TapeAccess {
  using Node = Tape::Node;

  static bool needs_grad(const Tensor& t) {
    return t.on_tape() && t.tape()->nodes_[static_cast<std::size_t>(t.node())].needs_grad;
  }

  // Records `result` as the output of `op` if any input requires a gradient.
  template <class Fill>
  static Tensor record(Op op, Tensor result, std::initializer_list<const Tensor*> inputs, Fill&& fill) {
    Tape* tape = detail::common_tape(inputs);
    if (!tape) return result;
    bool any = false;
    for (const Tensor* t : inputs) any = any || needs_grad(*t);
    if (!any) return result;
    Node n;
    n.op = op;
    n.needs_grad = true;
    for (const Tensor* t : inputs) n.in.push_back(tape->node_of(*t));
    fill(n);
    return tape->push(std::move(n), result);
  }

  static Tensor record_list(Op op, Tensor result, const std::vector<Tensor>& inputs, std::size_t axis) {
    Tape* tape = nullptr;
    bool any = false;
    for (const Tensor& t : inputs) {
      if (!t.on_tape()) continue;
      if (tape && tape != t.tape()) throw ContractError("operands belong to different tapes");
      tape = t.tape();
      any = any || needs_grad(t);
    }
    if (!tape || !any) return result;
    Node n;
    n.op = op;
    n.needs_grad = true;
    n.axis = axis;
    for (const Tensor& t : inputs) n.in.push_back(tape->node_of(t));
    return tape->push(std::move(n), result);
  }
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class F>
Tensor unary(const Tensor& a, Op op, F&& f) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return TapeAccess::record(op, Tensor(a.shape(), std::move(out)), {&a}, [](auto&) {});
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, Op op, const char* name, F&& f) {
  require_same_shape(a, b, name);
  std::vector<double> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return TapeAccess::record(op, Tensor(a.shape(), std::move(out)), {&a, &b}, [](auto&) {});
}

}  // namespace detail

// ---- primitives -----------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  if (b.rank() != 2) throw ShapeError("matmul: right operand must be rank 2, got " + shape_str(b.shape()));
  if (a.rank() == 0) throw ShapeError("matmul: left operand must be rank >= 1");
  if (a.rank() == 1 && trans_a) throw ShapeError("matmul: cannot transpose a rank-1 operand");
  const std::size_t ar = a.rows(), ac = a.cols();
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t bk = trans_b ? b.cols() : b.rows(), n = trans_b ? b.rows() : b.cols();
  if (k != bk)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  kernel::matmul(a.data(), ar, ac, trans_a, b.data(), b.rows(), b.cols(), trans_b, out);
  Shape s = a.rank() == 1 ? Shape{n} : Shape{m, n};
  return TapeAccess::record(Op::MatMul, Tensor(std::move(s), std::move(out)), {&a, &b}, [&](auto& node) {
    node.trans_a = trans_a;
    node.trans_b = trans_b;
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, Op::Add, "add", [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, Op::Sub, "sub", [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, Op::Mul, "mul", [](double x, double y) { return x * y; });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * in[i];
  return TapeAccess::record(Op::Scale, Tensor(a.shape(), std::move(out)), {&a},
                            [&](auto& node) { node.scalar = c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + c;
  return TapeAccess::record(Op::AddScalar, Tensor(a.shape(), std::move(out)), {&a}, [](auto&) {});
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, Op::Tanh, [](double x) { return std::tanh(x); });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary(a, Op::Relu, [](double x) { return x > 0.0 ? x : 0.0; });
}
inline Tensor exp(const Tensor& a) {
  return detail::unary(a, Op::Exp, [](double x) { return std::exp(x); });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(a, Op::Log, [](double x) { return std::log(x); });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(a, Op::Square, [](double x) { return x * x; });
}

// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return TapeAccess::record(Op::Sum, Tensor::scalar(s), {&a}, [](auto&) {});
}

// Sum over the last axis: [r, c] -> [r], [n] -> scalar.
inline Tensor sum_last(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  const auto in = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += in[i * c + j];
    out[i] = s;
  }
  Shape s = a.rank() == 2 ? Shape{r} : Shape{};
  return TapeAccess::record(Op::SumLast, Tensor(std::move(s), std::move(out)), {&a}, [](auto&) {});
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return TapeAccess::record(Op::Mean, Tensor::scalar(s / static_cast<double>(a.size())), {&a}, [](auto&) {});
}

// axis 0 stacks rows of rank-2 tensors; axis 1 (or the last axis of rank-1
// tensors) joins columns.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts.front().rank();
  for (const auto& p : parts)
    if (p.rank() != rank || rank == 0) throw ShapeError("concat: inputs must share a rank >= 1");
  const bool along_last = (rank == 1) || axis == 1;
  if (rank == 1 && axis != 0) throw ShapeError("concat: axis out of range for rank 1");
  if (axis > 1) throw ShapeError("concat: axis out of range");
  std::vector<double> out;
  Shape s;
  if (!along_last) {
    const std::size_t c = parts.front().cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
      if (p.cols() != c) throw ShapeError("concat rows: column counts differ");
      r += p.rows();
    }
    out.reserve(r * c);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    s = {r, c};
  } else {
    const std::size_t r = parts.front().rows();
    std::size_t c = 0;
    for (const auto& p : parts) {
      if (p.rows() != r) throw ShapeError("concat cols: row counts differ");
      c += p.cols();
    }
    out.resize(r * c);
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p.cols();
      for (std::size_t i = 0; i < r; ++i)
        std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(i * pc), pc, out.begin() + static_cast<std::ptrdiff_t>(i * c + off));
      off += pc;
    }
    s = rank == 1 ? Shape{c} : Shape{r, c};
  }
  return TapeAccess::record_list(Op::Concat, Tensor(std::move(s), std::move(out)), parts, along_last ? 1 : 0);
}

// Half-open range [begin, end) along `axis` (rank 1: axis 0 is the only axis).
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (a.rank() == 0) throw ShapeError("slice: scalar input");
  if (axis >= a.rank()) throw ShapeError("slice: axis out of range");
  const bool cols = (a.rank() == 1) || axis == 1;
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t extent = cols ? c : r;
  if (begin > end || end > extent) throw ShapeError("slice: range out of bounds");
  std::vector<double> out;
  Shape s;
  const auto in = a.data();
  if (cols) {
    const std::size_t w = end - begin;
    out.resize(r * w);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * w + j] = in[i * c + begin + j];
    s = a.rank() == 1 ? Shape{w} : Shape{r, w};
  } else {
    out.assign(in.begin() + static_cast<std::ptrdiff_t>(begin * c), in.begin() + static_cast<std::ptrdiff_t>(end * c));
    s = {end - begin, c};
  }
  return TapeAccess::record(Op::Slice, Tensor(std::move(s), std::move(out)), {&a}, [&](auto& node) {
    node.axis = cols ? 1 : 0;
    node.begin = begin;
    node.end = end;
  });
}

// Row selection (indices may repeat) from a rank-2 tensor.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  if (a.rank() != 2) throw ShapeError("gather_rows: rank-2 input required");
  const std::size_t c = a.cols();
  std::vector<double> out(index.size() * c);
  const auto in = a.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(index[k] * c), c, out.begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  Shape s{index.size(), c};
  return TapeAccess::record(Op::GatherRows, Tensor(std::move(s), std::move(out)), {&a},
                            [&](auto& node) { node.index = std::move(index); });
}

// Softmax over the last axis. Entries equal to -inf get probability 0; a row
// with no finite entry is a contract violation.
inline Tensor softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, in[i * c + j]);
    if (!std::isfinite(mx)) throw ContractError("softmax: row " + std::to_string(i) + " has no finite entry");
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(in[i * c + j] - mx);
      out[i * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return TapeAccess::record(Op::Softmax, Tensor(a.shape(), std::move(out)), {&a}, [](auto&) {});
}

// x [r, c] (or [c]) plus bias [c] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.cols() != x.cols())
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " incompatible with " + shape_str(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  const auto in = x.data();
  const auto b = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = in[i * c + j] + b[j];
  return TapeAccess::record(Op::AddBias, Tensor(x.shape(), std::move(out)), {&x, &bias}, [](auto&) {});
}

inline Tensor reshape(const Tensor& a, Shape s) {
  if (shape_size(s) != a.size()) throw ShapeError("reshape: element count differs");
  return TapeAccess::record(Op::Reshape, Tensor(std::move(s), a.to_vector()), {&a}, [](auto&) {});
}

// ---- backward -------------------------------------------------------------

inline Gradients Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss is not recorded on this tape");
  if (loss.size() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (consumed_) throw ContractError("backward: tape already consumed");
  consumed_ = true;

  Gradients out;
  out.tape_ = this;
  auto& g = out.grads_;
  g.resize(nodes_.size());
  g[static_cast<std::size_t>(loss.node())].assign(1, 1.0);

  auto acc = [&](int id) -> std::vector<double>* {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad) return nullptr;
    auto& v = g[static_cast<std::size_t>(id)];
    if (v.empty()) v.assign(node.value->size(), 0.0);
    return &v;
  };

  for (std::size_t id = nodes_.size(); id-- > 0;) {
    const Node& node = nodes_[id];
    if (g[id].empty() || node.op == Op::Leaf || node.op == Op::Constant) continue;
    const std::vector<double>& go = g[id];
    const std::vector<double>& y = *node.value;
    auto in_value = [&](std::size_t k) -> const std::vector<double>& {
      return *nodes_[static_cast<std::size_t>(node.in[k])].value;
    };
    auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[static_cast<std::size_t>(node.in[k])].shape; };

    switch (node.op) {
      case Op::MatMul: {
        const Shape& sa = in_shape(0);
        const Shape& sb = in_shape(1);
        const std::size_t ar = sa.size() == 2 ? sa[0] : 1, ac = sa.back();
        const std::size_t br = sb[0], bc = sb[1];
        const std::size_t m = node.trans_a ? ac : ar, n = node.trans_b ? br : bc;
        if (auto* ga = acc(node.in[0])) {
          // dA = dC op(B)^T  (or its transpose when A was transposed)
          if (!node.trans_a)
            kernel::matmul(go, m, n, false, in_value(1), br, bc, !node.trans_b, *ga, true);
          else
            kernel::matmul(in_value(1), br, bc, node.trans_b, go, m, n, true, *ga, true);
        }
        if (auto* gb = acc(node.in[1])) {
          if (!node.trans_b)
            kernel::matmul(in_value(0), ar, ac, !node.trans_a, go, m, n, false, *gb, true);
          else
            kernel::matmul(go, m, n, true, in_value(0), ar, ac, node.trans_a, *gb, true);
        }
        break;
      }
      case Op::Add:
      case Op::Sub: {
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
        if (auto* gb = acc(node.in[1])) {
          const double s = node.op == Op::Add ? 1.0 : -1.0;
          for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += s * go[i];
        }
        break;
      }
      case Op::Mul: {
        const auto& a = in_value(0);
        const auto& b = in_value(1);
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * b[i];
        if (auto* gb = acc(node.in[1]))
          for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * a[i];
        break;
      }
      case Op::Scale:
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += node.scalar * go[i];
        break;
      case Op::AddScalar:
      case Op::Reshape:
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
        break;
      case Op::Tanh:
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * (1.0 - y[i] * y[i]);
        break;
      case Op::Relu:
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += y[i] > 0.0 ? go[i] : 0.0;
        break;
      case Op::Exp:
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * y[i];
        break;
      case Op::Log: {
        const auto& a = in_value(0);
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] / a[i];
        break;
      }
      case Op::Square: {
        const auto& a = in_value(0);
        if (auto* ga = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += 2.0 * a[i] * go[i];
        break;
      }
      case Op::Sum:
        if (auto* ga = acc(node.in[0]))
          for (double& v : *ga) v += go[0];
        break;
      case Op::Mean:
        if (auto* ga = acc(node.in[0])) {
          const double s = go[0] / static_cast<double>(ga->size());
          for (double& v : *ga) v += s;
        }
        break;
      case Op::SumLast:
        if (auto* ga = acc(node.in[0])) {
          const std::size_t c = in_shape(0).back();
          for (std::size_t i = 0; i < ga->size(); i += c)
            for (std::size_t j = 0; j < c; ++j) (*ga)[i + j] += go[i / c];
        }
        break;
      case Op::Concat: {
        const bool along_last = node.axis == 1;
        const std::size_t r = node.shape.size() == 2 ? node.shape[0] : 1;
        const std::size_t c = node.shape.back();
        std::size_t off = 0;
        for (std::size_t k = 0; k < node.in.size(); ++k) {
          const Shape& s = in_shape(k);
          const std::size_t pc = s.back();
          const std::size_t pr = s.size() == 2 ? s[0] : 1;
          auto* gk = acc(node.in[k]);
          if (along_last) {
            if (gk)
              for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < pc; ++j) (*gk)[i * pc + j] += go[i * c + off + j];
            off += pc;
          } else {
            if (gk)
              for (std::size_t i = 0; i < pr * pc; ++i) (*gk)[i] += go[off * c + i];
            off += pr;
          }
        }
        break;
      }
      case Op::Slice:
        if (auto* ga = acc(node.in[0])) {
          const Shape& s = in_shape(0);
          const std::size_t c = s.back();
          const std::size_t r = s.size() == 2 ? s[0] : 1;
          if (node.axis == 1) {
            const std::size_t w = node.end - node.begin;
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j) (*ga)[i * c + node.begin + j] += go[i * w + j];
          } else {
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[node.begin * c + i] += go[i];
          }
        }
        break;
      case Op::GatherRows:
        if (auto* ga = acc(node.in[0])) {
          const std::size_t c = in_shape(0).back();
          for (std::size_t k = 0; k < node.index.size(); ++k)
            for (std::size_t j = 0; j < c; ++j) (*ga)[node.index[k] * c + j] += go[k * c + j];
        }
        break;
      case Op::Softmax:
        if (auto* ga = acc(node.in[0])) {
          const std::size_t c = node.shape.back();
          const std::size_t r = y.size() / c;
          for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * go[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
              const double p = y[i * c + j];
              if (p != 0.0) (*ga)[i * c + j] += p * (go[i * c + j] - dot);
            }
          }
        }
        break;
      case Op::AddBias: {
        const std::size_t c = node.shape.back();
        if (auto* gx = acc(node.in[0]))
          for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
        if (auto* gb = acc(node.in[1]))
          for (std::size_t i = 0; i < go.size(); i += c)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += go[i + j];
        break;
      }
      case Op::Leaf:
      case Op::Constant:
        break;
    }
  }
  return out;
}

// Free-function spelling of Tape::backward.
inline Gradients backward(const Tensor& loss) {
  if (!loss.on_tape()) throw ContractError("backward: loss is not recorded on a tape");
  return loss.tape()->backward(loss);
}

// Central-difference gradient of a scalar function, coordinate by coordinate.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  std::vector<double> base = theta.detached().to_vector();
  std::vector<double> grad(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) {
    std::vector<double> plus = base, minus = base;
    plus[k] += h;
    minus[k] -= h;
    const double fp = f(Tensor(theta.shape(), std::move(plus)));
    const double fm = f(Tensor(theta.shape(), std::move(minus)));
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return Tensor(theta.shape(), std::move(grad));
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace lmsode
