#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major Eigen
// matrices. A Tape records every operation of one forward pass; backward()
// walks it in reverse and accumulates gradients into the nodes that need them.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace muteswap {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

namespace ad {

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

enum class Padding { kZero, kReplicate, kCircular };

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> v) { return push(std::move(v), false, nullptr); }
  Var<T> variable(Matrix<T> v) { return push(std::move(v), true, nullptr); }

  Var<T> push(Matrix<T> v, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Matrix<T>(), requires_grad, std::move(fn)});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Matrix<T>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward() root w.r.t. this node; zeros if none reached it.
  Matrix<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  const Matrix<T>& grad_ref(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Expr>
  void accumulate_row(int id, Eigen::Index row, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
    n.grad.row(row) += g;
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root, or `seed` when given.
  void backward(Var<T> root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw ShapeError("backward root must be 1x1, got " + shape_str(root.rows(), root.cols()));
    }
    backward(root, Matrix<T>::Ones(1, 1));
  }

  void backward(Var<T> root, const Matrix<T>& seed) {
    for (auto& n : nodes_) n.grad.resize(0, 0);
    accumulate(root.id, seed);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                     " vs " + shape_str(b.rows(), b.cols()));
  }
}

// Maps output row t and kernel tap offset to a source row, or -1 for a zero pad.
inline Eigen::Index pad_index(Eigen::Index t, Eigen::Index rows, Padding pad) {
  if (t >= 0 && t < rows) return t;
  switch (pad) {
    case Padding::kZero:
      return -1;
    case Padding::kReplicate:
      return t < 0 ? 0 : rows - 1;
    case Padding::kCircular:
      return ((t % rows) + rows) % rows;
  }
  return -1;
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                     shape_str(b.rows(), b.cols()));
  }
  Tape<T>& tp = *a.tape;
  Matrix<T> v = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return tp.push(std::move(v), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad_ref(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " * (" +
                     shape_str(b.rows(), b.cols()) + ")^T");
  }
  Tape<T>& tp = *a.tape;
  Matrix<T> v = a.value() * b.value().transpose();
  const int ia = a.id, ib = b.id;
  return tp.push(std::move(v), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad_ref(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const int ia = a.id;
  return a.tape->push(a.value().transpose(), a.requires_grad(), [ia](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad_ref(self).transpose());
  });
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::any_grad({a, b}),
                      [ia, ib](Tape<T>& t, int self) {
                        t.accumulate(ia, t.grad_ref(self));
                        t.accumulate(ib, t.grad_ref(self));
                      });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), detail::any_grad({a, b}),
                      [ia, ib](Tape<T>& t, int self) {
                        t.accumulate(ia, t.grad_ref(self));
                        t.accumulate(ib, -t.grad_ref(self));
                      });
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "hadamard");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                      [ia, ib](Tape<T>& t, int self) {
                        const Matrix<T>& g = t.grad_ref(self);
                        if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                        if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                      });
}

/// Adds a 1xC row to every row of an RxC matrix.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: cannot broadcast " + shape_str(row.rows(), row.cols()) +
                     " over " + shape_str(a.rows(), a.cols()));
  }
  const int ia = a.id, ir = row.id;
  Matrix<T> v = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(v), detail::any_grad({a, row}), [ia, ir](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad_ref(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, a.requires_grad(), [ia, s](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad_ref(self) * s);
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  const int ia = a.id;
  Matrix<T> v = a.value().array() + s;
  return a.tape->push(std::move(v), a.requires_grad(),
                      [ia](Tape<T>& t, int self) { t.accumulate(ia, t.grad_ref(self)); });
}

template <typename T>
Var<T> square(Var<T> a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().square().matrix(), a.requires_grad(),
                      [ia](Tape<T>& t, int self) {
                        t.accumulate(ia, (t.grad_ref(self).array() * T(2) *
                                          t.value(ia).array()).matrix());
                      });
}

template <typename T>
Var<T> exp(Var<T> a) {
  const int ia = a.id;
  Matrix<T> v = a.value().array().exp().matrix();
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad_ref(self).cwiseProduct(t.value(self)));
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().tanh().matrix(), a.requires_grad(),
                      [ia](Tape<T>& t, int self) {
                        const auto y = t.value(self).array();
                        t.accumulate(ia, (t.grad_ref(self).array() * (T(1) - y.square())).matrix());
                      });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  const int ia = a.id;
  Matrix<T> v = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const auto y = t.value(self).array();
    t.accumulate(ia, (t.grad_ref(self).array() * y * (T(1) - y)).matrix());
  });
}

/// x * sigmoid(x)
template <typename T>
Var<T> silu(Var<T> a) {
  const int ia = a.id;
  Matrix<T> v = (a.value().array() / (T(1) + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const auto x = t.value(ia).array();
    const auto s = T(1) / (T(1) + (-x).exp());
    t.accumulate(ia, (t.grad_ref(self).array() * (s * (T(1) + x * (T(1) - s)))).matrix());
  });
}

/// Hard clamp; gradient is zero where the input lies outside [lo, hi].
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  const int ia = a.id;
  Matrix<T> v = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->push(std::move(v), a.requires_grad(), [ia, lo, hi](Tape<T>& t, int self) {
    const auto x = t.value(ia).array();
    const auto inside = ((x >= lo) && (x <= hi)).template cast<T>();
    t.accumulate(ia, (t.grad_ref(self).array() * inside).matrix());
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
  const int ia = a.id;
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const T g = t.grad_ref(self)(0, 0);
    const auto& x = t.value(ia);
    t.accumulate(ia, Matrix<T>::Constant(x.rows(), x.cols(), g));
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// Column means over rows: RxC -> 1xC.
template <typename T>
Var<T> mean_rows(Var<T> a) {
  const int ia = a.id;
  const auto n = static_cast<T>(a.rows());
  Matrix<T> v = a.value().colwise().sum() / n;
  return a.tape->push(std::move(v), a.requires_grad(), [ia, n](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    Matrix<T> g = t.grad_ref(self).replicate(x.rows(), 1) / n;
    t.accumulate(ia, g);
  });
}

/// Per-row sums: RxC -> Rx1.
template <typename T>
Var<T> row_sum(Var<T> a) {
  const int ia = a.id;
  Matrix<T> v = a.value().rowwise().sum();
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    Matrix<T> g = t.grad_ref(self).replicate(1, x.cols());
    t.accumulate(ia, g);
  });
}

/// Diagonal of a square matrix as an Nx1 column.
template <typename T>
Var<T> diagonal(Var<T> a) {
  if (a.rows() != a.cols()) throw ShapeError("diagonal: matrix is not square");
  const int ia = a.id;
  Matrix<T> v = a.value().diagonal();
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const auto n = t.value(ia).rows();
    Matrix<T> g = Matrix<T>::Zero(n, n);
    g.diagonal() = t.grad_ref(self).col(0);
    t.accumulate(ia, g);
  });
}

/// Mean absolute elementwise difference, with sign(0) = 0 as the subgradient.
template <typename T>
Var<T> l1_mean(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "l1_mean");
  const int ia = a.id, ib = b.id;
  const auto n = static_cast<T>(a.value().size());
  Matrix<T> v(1, 1);
  v(0, 0) = (a.value() - b.value()).cwiseAbs().sum() / n;
  return a.tape->push(std::move(v), detail::any_grad({a, b}), [ia, ib, n](Tape<T>& t, int self) {
    const T g = t.grad_ref(self)(0, 0) / n;
    Matrix<T> s = (t.value(ia) - t.value(ib)).array().sign().matrix() * g;
    if (t.requires_grad(ia)) t.accumulate(ia, s);
    if (t.requires_grad(ib)) t.accumulate(ib, -s);
  });
}

// ---------------------------------------------------------------- row-wise normalizers

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  const int ia = a.id;
  const auto& x = a.value();
  Matrix<T> v(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    const T lse = m + std::log((x.row(r).array() - m).exp().sum());
    v.row(r) = x.row(r).array() - lse;
  }
  return a.tape->push(std::move(v), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad_ref(self);
    Matrix<T> p = y.array().exp().matrix();
    Matrix<T> out = g - (p.array().colwise() * g.rowwise().sum().array()).matrix();
    t.accumulate(ia, out);
  });
}

/// Row softmax of (a + mask); mask entries of -inf exclude columns.
template <typename T>
Var<T> softmax_rows(Var<T> a, const Matrix<T>* mask = nullptr) {
  const int ia = a.id;
  Matrix<T> x = a.value();
  if (mask != nullptr) x += *mask;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
  return a.tape->push(std::move(x), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const auto& p = t.value(self);
    const auto& g = t.grad_ref(self);
    const Matrix<T> dot = (g.cwiseProduct(p)).rowwise().sum();
    Matrix<T> out = p.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, out);
  });
}

/// Per-row layer normalization with learned gain and bias (both 1xC).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const Eigen::Index R = xv.rows(), C = xv.cols();
  if (gain.cols() != C || bias.cols() != C) throw ShapeError("layer_norm: parameter width");
  Matrix<T> xhat(R, C);
  Matrix<T> inv_std(R, 1);
  for (Eigen::Index r = 0; r < R; ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    inv_std(r, 0) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r, 0);
  }
  Matrix<T> y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->push(
      std::move(y), detail::any_grad({x, gain, bias}),
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, int self) {
        const auto& g = t.grad_ref(self);
        if (t.requires_grad(ig)) t.accumulate(ig, (g.cwiseProduct(xhat)).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ix)) {
          const auto C = static_cast<T>(g.cols());
          Matrix<T> gx = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
          Matrix<T> out(g.rows(), g.cols());
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const T m1 = gx.row(r).sum() / C;
            const T m2 = gx.row(r).dot(xhat.row(r)) / C;
            out.row(r) = (gx.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r, 0);
          }
          t.accumulate(ix, out);
        }
      });
}

/// Scales every row to unit L2 norm. Zero-norm rows are an error.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
  const auto& x = a.value();
  Matrix<T> norms = x.rowwise().norm();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (!(norms(r, 0) > T(0)) || !std::isfinite(static_cast<double>(norms(r, 0)))) {
      throw std::domain_error("l2_normalize_rows: row " + std::to_string(r) +
                              " has zero or non-finite norm; cosine similarity undefined");
    }
  }
  Matrix<T> y = (x.array().colwise() / norms.col(0).array()).matrix();
  const int ia = a.id;
  return a.tape->push(std::move(y), a.requires_grad(),
                      [ia, norms = std::move(norms)](Tape<T>& t, int self) {
                        const auto& y = t.value(self);
                        const auto& g = t.grad_ref(self);
                        const Matrix<T> dot = g.cwiseProduct(y).rowwise().sum();
                        Matrix<T> out = ((g - (y.array().colwise() * dot.col(0).array()).matrix())
                                             .array()
                                             .colwise() /
                                         norms.col(0).array())
                                            .matrix();
                        t.accumulate(ia, out);
                      });
}

// ---------------------------------------------------------------- structural

template <typename T>
Var<T> reshape(Var<T> a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) {
    throw ShapeError("reshape: " + shape_str(a.rows(), a.cols()) + " -> " +
                     shape_str(rows, cols));
  }
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix<T> v = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  return a.tape->push(std::move(v), a.requires_grad(), [ia, r0, c0](Tape<T>& t, int self) {
    t.accumulate(ia, Eigen::Map<const Matrix<T>>(t.grad_ref(self).data(), r0, c0));
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols: out of range");
  const int ia = a.id;
  Matrix<T> v = a.value().middleCols(start, n);
  return a.tape->push(std::move(v), a.requires_grad(), [ia, start, n](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    Matrix<T> g = Matrix<T>::Zero(x.rows(), x.cols());
    g.middleCols(start, n) = t.grad_ref(self);
    t.accumulate(ia, g);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.rows()) throw ShapeError("slice_rows: out of range");
  const int ia = a.id;
  Matrix<T> v = a.value().middleRows(start, n);
  return a.tape->push(std::move(v), a.requires_grad(), [ia, start, n](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    Matrix<T> g = Matrix<T>::Zero(x.rows(), x.cols());
    g.middleRows(start, n) = t.grad_ref(self);
    t.accumulate(ia, g);
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index R = parts[0].rows();
  Eigen::Index C = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != R) throw ShapeError("concat_cols: row mismatch");
    C += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix<T> v(R, C);
  std::vector<int> ids;
  std::vector<Eigen::Index> offs;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    ids.push_back(p.id);
    offs.push_back(c);
    c += p.cols();
  }
  return parts[0].tape->push(std::move(v), rg, [ids, offs](Tape<T>& t, int self) {
    const auto& g = t.grad_ref(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) t.accumulate(ids[k], g.middleCols(offs[k], t.value(ids[k]).cols()));
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index C = parts[0].cols();
  Eigen::Index R = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != C) throw ShapeError("concat_rows: column mismatch");
    R += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix<T> v(R, C);
  std::vector<int> ids;
  std::vector<Eigen::Index> offs;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    ids.push_back(p.id);
    offs.push_back(r);
    r += p.rows();
  }
  return parts[0].tape->push(std::move(v), rg, [ids, offs](Tape<T>& t, int self) {
    const auto& g = t.grad_ref(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) t.accumulate(ids[k], g.middleRows(offs[k], t.value(ids[k]).rows()));
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  return concat_rows(std::span<const Var<T>>(parts));
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  return concat_cols(std::span<const Var<T>>(parts));
}

/// out.row(i) = a.row(index[i]); repeated indices accumulate gradient.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> index) {
  const auto& x = a.value();
  Matrix<T> v(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  const int ia = a.id;
  return a.tape->push(std::move(v), a.requires_grad(),
                      [ia, index = std::move(index)](Tape<T>& t, int self) {
                        const auto& x = t.value(ia);
                        const auto& g = t.grad_ref(self);
                        Matrix<T> out = Matrix<T>::Zero(x.rows(), x.cols());
                        for (std::size_t i = 0; i < index.size(); ++i) {
                          out.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                        }
                        t.accumulate(ia, out);
                      });
}

/// Row i comes from `on` where take[i] is set, else from `off`.
template <typename T>
Var<T> select_rows(const std::vector<bool>& take, Var<T> on, Var<T> off) {
  detail::require_same_shape(on, off, "select_rows");
  if (static_cast<Eigen::Index>(take.size()) != on.rows()) throw ShapeError("select_rows: mask");
  Matrix<T> v = off.value();
  for (std::size_t i = 0; i < take.size(); ++i) {
    if (take[i]) v.row(static_cast<Eigen::Index>(i)) = on.value().row(static_cast<Eigen::Index>(i));
  }
  const int ion = on.id, ioff = off.id;
  return on.tape->push(std::move(v), detail::any_grad({on, off}),
                       [take, ion, ioff](Tape<T>& t, int self) {
                         const auto& g = t.grad_ref(self);
                         Matrix<T> gon = Matrix<T>::Zero(g.rows(), g.cols());
                         Matrix<T> goff = g;
                         for (std::size_t i = 0; i < take.size(); ++i) {
                           if (!take[i]) continue;
                           const auto r = static_cast<Eigen::Index>(i);
                           gon.row(r) = g.row(r);
                           goff.row(r).setZero();
                         }
                         if (t.requires_grad(ion)) t.accumulate(ion, gon);
                         if (t.requires_grad(ioff)) t.accumulate(ioff, goff);
                       });
}

// ---------------------------------------------------------------- temporal convolution

/// Unfolds a TxC sequence into Tx(k*C) windows centred on each frame.
/// Tap j of row t reads source row t + j - (k-1)/2 under the given padding.
template <typename T>
Var<T> im2col(Var<T> a, int kernel, Padding pad) {
  if (kernel < 1 || kernel % 2 == 0) throw ShapeError("im2col: kernel must be odd and >= 1");
  const auto& x = a.value();
  const Eigen::Index R = x.rows(), C = x.cols();
  const int half = (kernel - 1) / 2;
  Matrix<T> v = Matrix<T>::Zero(R, kernel * C);
  for (Eigen::Index r = 0; r < R; ++r) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = detail::pad_index(r + j - half, R, pad);
      if (src >= 0) v.block(r, j * C, 1, C) = x.row(src);
    }
  }
  const int ia = a.id;
  return a.tape->push(std::move(v), a.requires_grad(), [ia, kernel, pad](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    const Eigen::Index R = x.rows(), C = x.cols();
    const int half = (kernel - 1) / 2;
    const auto& g = t.grad_ref(self);
    Matrix<T> out = Matrix<T>::Zero(R, C);
    for (Eigen::Index r = 0; r < R; ++r) {
      for (int j = 0; j < kernel; ++j) {
        const Eigen::Index src = detail::pad_index(r + j - half, R, pad);
        if (src >= 0) out.row(src) += g.block(r, j * C, 1, C);
      }
    }
    t.accumulate(ia, out);
  });
}

/// Depthwise temporal convolution: out[t, c] = sum_j w[j, c] * x[t + j - half, c].
template <typename T>
Var<T> depthwise_conv(Var<T> a, Var<T> w, Padding pad) {
  const auto& x = a.value();
  const auto& wv = w.value();
  if (wv.cols() != x.cols()) throw ShapeError("depthwise_conv: channel mismatch");
  const int kernel = static_cast<int>(wv.rows());
  if (kernel % 2 == 0) throw ShapeError("depthwise_conv: kernel must be odd");
  const int half = (kernel - 1) / 2;
  const Eigen::Index R = x.rows();
  Matrix<T> v = Matrix<T>::Zero(R, x.cols());
  for (Eigen::Index r = 0; r < R; ++r) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = detail::pad_index(r + j - half, R, pad);
      if (src >= 0) v.row(r) += x.row(src).cwiseProduct(wv.row(j));
    }
  }
  const int ia = a.id, iw = w.id;
  return a.tape->push(std::move(v), detail::any_grad({a, w}), [ia, iw, pad](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    const auto& wv = t.value(iw);
    const int kernel = static_cast<int>(wv.rows());
    const int half = (kernel - 1) / 2;
    const Eigen::Index R = x.rows();
    const auto& g = t.grad_ref(self);
    Matrix<T> gx = Matrix<T>::Zero(x.rows(), x.cols());
    Matrix<T> gw = Matrix<T>::Zero(wv.rows(), wv.cols());
    for (Eigen::Index r = 0; r < R; ++r) {
      for (int j = 0; j < kernel; ++j) {
        const Eigen::Index src = detail::pad_index(r + j - half, R, pad);
        if (src < 0) continue;
        gx.row(src) += g.row(r).cwiseProduct(wv.row(j));
        gw.row(j) += g.row(r).cwiseProduct(x.row(src));
      }
    }
    if (t.requires_grad(ia)) t.accumulate(ia, gx);
    if (t.requires_grad(iw)) t.accumulate(iw, gw);
  });
}

// ---------------------------------------------------------------- operators

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }

}  // namespace ad
}  // namespace muteswap
