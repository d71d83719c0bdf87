#pragma once

// Dense reverse-mode automatic differentiation over row-major double
// matrices, plus the Adam optimizer.
//
// The graph is define-by-run: every forward pass records onto a fresh Tape
// and backward() walks that record once in reverse. Matrix products are
// delegated to Eigen; everything else is written out by hand so the
// gradient rules are visible next to the forward rules.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "f2s/errors.hpp"

namespace f2s::tg {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : shape_(std::move(shape)), requires_grad_(requires_grad) {
    check_shape();
    data_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
    check_shape();
    if (data_.size() != count(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, v); }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[shape_.size() - 2] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  double item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  void check_shape() const {
    if (shape_.empty() || shape_.size() > 4)
      throw DimensionError("tensor rank must be 1..4, got shape " + shape_str(shape_));
    for (auto d : shape_)
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

// Boolean matrix used by masked_softmax and the neighbor partition.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool fill = false) : rows(r), cols(c), bits(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t i, std::size_t j) const { return bits[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits[i * cols + j] = v ? 1 : 0; }
  std::size_t row_count(std::size_t i) const {
    std::size_t k = 0;
    for (std::size_t j = 0; j < cols; ++j) k += bits[i * cols + j];
    return k;
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline MapC view(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
inline Map view(std::vector<double>& v, std::size_t r, std::size_t c) { return Map(v.data(), r, c); }

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() > 2) throw DimensionError(std::string(op) + " expects rank <= 2, got " + shape_str(t.shape()));
}
}  // namespace detail

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), false, {}, nullptr); }

  Var variable(Tensor t) { return push(std::move(t), true, {}, nullptr); }

  // Records the tensor as a leaf; gradient tracking follows its flag.
  Var leaf(Tensor t) {
    const bool rg = t.requires_grad();
    return push(std::move(t), rg, {}, nullptr);
  }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
    return push(std::move(value), rg, std::move(inputs), rg ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer; empty vector means "no gradient reached this node".
  const std::vector<double>& grad(std::size_t id) const { return nodes_[id].grad; }

  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  // Dense gradient for a node, zeros if it was never touched.
  Tensor grad_tensor(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), n.grad);
  }

  std::size_t size() const { return nodes_.size(); }

  void zero_grad() {
    for (auto& n : nodes_) n.grad.clear();
  }

  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss recorded on a different tape");
    if (nodes_[loss.id].value.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));
    zero_grad();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, k);
    }
  }

  std::size_t input(std::size_t id, std::size_t slot) const { return nodes_[id].inputs[slot]; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Tensor t, bool rg, std::vector<std::size_t> inputs, BackwardFn fn) {
    for (auto i : inputs)
      if (i >= nodes_.size()) throw ContractError("tape input out of order");
    nodes_.push_back(Node{std::move(t), {}, rg, std::move(inputs), std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across push_back
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const std::vector<double>& Var::grad() const { return tape->grad(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {
inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands live on different tapes");
}

inline void accumulate(Tape& t, std::size_t id, const std::vector<double>& g) {
  if (!t.requires_grad(id)) return;
  auto& buf = t.grad_buffer(id);
  for (std::size_t k = 0; k < g.size(); ++k) buf[k] += g[k];
}

// Broadcast geometry of a binary elementwise op on matrices: each operand
// dimension either equals the output dimension or is 1.
struct Broadcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;

  std::size_t ia(std::size_t i, std::size_t j) const { return (ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j); }
  std::size_t ib(std::size_t i, std::size_t j) const { return (br == 1 ? 0 : i) * bc + (bc == 1 ? 0 : j); }
};

inline Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() && a.rank() > 2) {
    // Higher-rank tensors are handled as flat rows of equal shape.
    return {1, a.size(), 1, a.size(), 1, b.size()};
  }
  require_matrix(a, op);
  require_matrix(b, op);
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                         shape_str(b.shape()));
  };
  const std::size_t r = dim(a.rows(), b.rows());
  const std::size_t c = dim(a.cols(), b.cols());
  return {r, c, a.rows(), a.cols(), b.rows(), b.cols()};
}

inline Shape out_shape(const Tensor& a, const Tensor& b, const Broadcast& g) {
  if (a.shape() == b.shape()) return a.shape();
  return Shape{g.rows, g.cols};
}

enum class BinOp { add, sub, mul, div };

inline Var binary(Var a, Var b, BinOp op, const char* name) {
  same_tape(a, b, name);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast g = broadcast(x, y, name);
  Tensor out(out_shape(x, y, g));
  auto& o = out.storage();
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.cols; ++j) {
      const double u = x[g.ia(i, j)];
      const double v = y[g.ib(i, j)];
      double r = 0.0;
      switch (op) {
        case BinOp::add: r = u + v; break;
        case BinOp::sub: r = u - v; break;
        case BinOp::mul: r = u * v; break;
        case BinOp::div: r = u / v; break;
      }
      o[i * g.cols + j] = r;
    }
  return a.tape->record(std::move(out), {a.id, b.id}, [g, op](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0), bi = t.input(self, 1);
    const auto& go = t.grad(self);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(bi);
    std::vector<double> gx(x.size(), 0.0), gy(y.size(), 0.0);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) {
        const double gg = go[i * g.cols + j];
        const std::size_t ka = g.ia(i, j), kb = g.ib(i, j);
        switch (op) {
          case BinOp::add: gx[ka] += gg; gy[kb] += gg; break;
          case BinOp::sub: gx[ka] += gg; gy[kb] -= gg; break;
          case BinOp::mul: gx[ka] += gg * y[kb]; gy[kb] += gg * x[ka]; break;
          case BinOp::div:
            gx[ka] += gg / y[kb];
            gy[kb] -= gg * x[ka] / (y[kb] * y[kb]);
            break;
        }
      }
    accumulate(t, ai, gx);
    accumulate(t, bi, gy);
  });
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = f(x[k]);
  return a.tape->record(std::move(out), {a.id}, [df](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    const auto& go = t.grad(self);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(self);
    std::vector<double> gx(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) gx[k] = go[k] * df(x[k], y[k]);
    accumulate(t, ai, gx);
  });
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_matrix(x, "matmul");
  detail::require_matrix(y, "matmul");
  if (x.cols() != y.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  Tensor out = Tensor::matrix(x.rows(), y.cols());
  detail::view(out.storage(), x.rows(), y.cols()).noalias() = detail::view(x) * detail::view(y);
  return a.tape->record(std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0), bi = t.input(self, 1);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(bi);
    auto go = detail::MapC(t.grad(self).data(), x.rows(), y.cols());
    if (t.requires_grad(ai)) {
      auto& gx = t.grad_buffer(ai);
      detail::view(gx, x.rows(), x.cols()).noalias() += go * detail::view(y).transpose();
    }
    if (t.requires_grad(bi)) {
      auto& gy = t.grad_buffer(bi);
      detail::view(gy, y.rows(), y.cols()).noalias() += detail::view(x).transpose() * go;
    }
  });
}

inline Var add(Var a, Var b) { return detail::binary(a, b, detail::BinOp::add, "add"); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, detail::BinOp::sub, "sub"); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, detail::BinOp::mul, "mul"); }
inline Var div(Var a, Var b) { return detail::binary(a, b, detail::BinOp::div, "div"); }

// Adds a 1×c row (or r×1 column) to every row (column) of a.
inline Var bias_add(Var a, Var bias) {
  const Tensor& b = bias.value();
  if (b.rows() != 1 && b.cols() != 1) throw DimensionError("bias_add: bias must be a row or column vector, got " + shape_str(b.shape()));
  return detail::binary(a, bias, detail::BinOp::add, "bias_add");
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var shift(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

// Gradient passes only where lo <= x <= hi.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var transpose(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "transpose");
  Tensor out = Tensor::matrix(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  return a.tape->record(std::move(out), {a.id}, [](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    const Tensor& x = t.value(ai);
    const auto& go = t.grad(self);
    std::vector<double> gx(x.size());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) gx[i * x.cols() + j] = go[j * x.rows() + i];
    detail::accumulate(t, ai, gx);
  });
}

inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape->record(Tensor::scalar(s), {a.id}, [](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    std::vector<double> gx(t.value(ai).size(), t.grad(self)[0]);
    detail::accumulate(t, ai, gx);
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Column-wise mean over rows: r×c -> 1×c.
inline Var mean_rows(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "mean_rows");
  const double inv = 1.0 / static_cast<double>(x.rows());
  Tensor out = Tensor::matrix(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) *= inv;
  return a.tape->record(std::move(out), {a.id}, [inv](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    const Tensor& x = t.value(ai);
    const auto& go = t.grad(self);
    std::vector<double> gx(x.size());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) gx[i * x.cols() + j] = go[j] * inv;
    detail::accumulate(t, ai, gx);
  });
}

// Row-wise softmax restricted to the unmasked (true) entries. Masked entries
// are exactly 0 and a row with no unmasked entry is all zeros.
inline Var masked_softmax(Var logits, const Mask& mask) {
  const Tensor& x = logits.value();
  detail::require_matrix(x, "masked_softmax");
  if (mask.rows != x.rows() || mask.cols != x.cols())
    throw DimensionError("masked_softmax: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                         " does not match logits " + shape_str(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask(i, j)) mx = std::max(mx, x(i, j));
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask(i, j)) z += (out(i, j) = std::exp(x(i, j) - mx));
    for (std::size_t j = 0; j < c; ++j)
      if (mask(i, j)) out(i, j) /= z;
  }
  return logits.tape->record(std::move(out), {logits.id}, [r, c](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    const Tensor& y = t.value(self);
    const auto& go = t.grad(self);
    std::vector<double> gx(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y(i, j) * go[i * c + j];
      // Masked entries have y == 0 and therefore receive no gradient.
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = y(i, j) * (go[i * c + j] - dot);
    }
    detail::accumulate(t, ai, gx);
  });
}

// a·aᵀ with the lower triangle mirrored from the upper, so the result is
// exactly symmetric.
inline Var gram(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "gram");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) s += x(i, k) * x(j, k);
      out(i, j) = s;
      out(j, i) = s;
    }
  return a.tape->record(std::move(out), {a.id}, [n, m](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    const Tensor& x = t.value(ai);
    auto go = detail::MapC(t.grad(self).data(), n, n);
    std::vector<double> gx(n * m, 0.0);
    detail::view(gx, n, m).noalias() = (go + go.transpose()) * detail::view(x);
    detail::accumulate(t, ai, gx);
  });
}

// Symmetric normalized adjacency with self-loops over rectified weights:
// D^{-1/2} (max(A,0) + I) D^{-1/2}. The diagonal of A is ignored.
inline Var normalized_adjacency(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "normalized_adjacency");
  if (x.rows() != x.cols()) throw DimensionError("normalized_adjacency: square matrix required, got " + shape_str(x.shape()));
  const std::size_t n = x.rows();
  std::vector<double> deg(n, 0.0);
  Tensor b = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      b(i, j) = i == j ? 1.0 : std::max(x(i, j), 0.0);
      deg[i] += b(i, j);
    }
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = b(i, j) / std::sqrt(deg[i] * deg[j]);
  return a.tape->record(std::move(out), {a.id}, [n, deg](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(self);
    const auto& go = t.grad(self);
    // dL/d(deg_i) = -1/(2 deg_i) * (sum_l G_il Y_il + sum_k G_ki Y_ki)
    std::vector<double> gdeg(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double gy = go[i * n + j] * y(i, j);
        gdeg[i] += gy;
        gdeg[j] += gy;
      }
    for (std::size_t i = 0; i < n; ++i) gdeg[i] *= -0.5 / deg[i];
    std::vector<double> gx(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j || x(i, j) <= 0.0) continue;
        gx[i * n + j] = go[i * n + j] / std::sqrt(deg[i] * deg[j]) + gdeg[i];
      }
    detail::accumulate(t, ai, gx);
  });
}

// Row k of a matrix as a 1×c tensor (embedding lookup).
inline Var select_row(Var table, std::size_t k) {
  const Tensor& x = table.value();
  detail::require_matrix(x, "select_row");
  if (k >= x.rows()) throw DimensionError("select_row: row " + std::to_string(k) + " outside " + shape_str(x.shape()));
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(1, c);
  for (std::size_t j = 0; j < c; ++j) out(0, j) = x(k, j);
  return table.tape->record(std::move(out), {table.id}, [k, c](Tape& t, std::size_t self) {
    const std::size_t ai = t.input(self, 0);
    if (!t.requires_grad(ai)) return;
    auto& g = t.grad_buffer(ai);
    const auto& go = t.grad(self);
    for (std::size_t j = 0; j < c; ++j) g[k * c + j] += go[j];
  });
}

// Copies the value onto the tape as a constant, cutting the gradient path.
inline Var detach(Var a) { return a.tape->constant(Tensor(a.value().shape(), a.value().storage())); }

// ---------------------------------------------------------------------------
// Parameters and Adam

struct Parameter {
  std::string name;
  Tensor value;
};

// Ordered, named collection of learnable tensors.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor t) {
    for (const auto& p : params_)
      if (p.name == name) throw ContractError("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(t)});
    return params_.back().value;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw ContractError("unknown parameter '" + name + "'");
  }
  Tensor& at(const std::string& name) { return params_[index_of(name)].value; }
  const Tensor& at(const std::string& name) const { return params_[index_of(name)].value; }

  std::size_t scalar_count() const {
    std::size_t k = 0;
    for (const auto& p : params_) k += p.value.size();
    return k;
  }

  // Zero-filled tensors matching every parameter's shape.
  std::vector<Tensor> zeros_like() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.emplace_back(p.value.shape(), 0.0);
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i)
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    return true;
  }

 private:
  std::vector<Parameter> params_;
};

using Gradients = std::vector<Tensor>;

// Leaves for every parameter of a set, recorded in order on a tape.
inline std::vector<Var> bind(Tape& tape, const ParameterSet& ps, bool requires_grad = true) {
  std::vector<Var> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(requires_grad ? tape.variable(p.value) : tape.constant(p.value));
  return out;
}

inline Gradients collect(const Tape& tape, const std::vector<Var>& leaves) {
  Gradients g;
  g.reserve(leaves.size());
  for (const auto& v : leaves) g.push_back(tape.grad_tensor(v));
  return g;
}

// g += scale * h, elementwise over matching gradient lists.
inline void accumulate(Gradients& g, const Gradients& h, double scale = 1.0) {
  if (g.size() != h.size()) throw DimensionError("gradient list sizes differ");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g[i].same_shape(h[i])) throw DimensionError("gradient shapes differ at index " + std::to_string(i));
    for (std::size_t k = 0; k < g[i].size(); ++k) g[i][k] += scale * h[i][k];
  }
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState for_params(const ParameterSet& ps, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    s.m = ps.zeros_like();
    s.v = ps.zeros_like();
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One bias-corrected Adam update. Throws DivergenceError naming the first
// parameter whose gradient is not finite; nothing is modified in that case.
inline void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params[i].value) || !state.m[i].same_shape(params[i].value))
      throw DimensionError("adam_step: shape mismatch for parameter '" + params[i].name + "'");
    for (double g : grads[i].data())
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter '" + params[i].name + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      w[k] -= state.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
  }
}

}  // namespace f2s::tg
