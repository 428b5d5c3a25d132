#pragma once

// Named parameter blocks, per-pass gradient binding, and the small layer
// vocabulary (linear, layer norm, attention, temporal convolution, LSTM)
// the model is assembled from.

#include "muteswap/autodiff.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace muteswap {

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
};

template <typename T>
class ParameterSet {
 public:
  int add(std::string name, Matrix<T> init) {
    if (index_.count(name) != 0) throw std::logic_error("duplicate parameter: " + name);
    index_.emplace(name, static_cast<int>(params_.size()));
    params_.push_back(Parameter<T>{std::move(name), std::move(init)});
    return static_cast<int>(params_.size()) - 1;
  }

  int index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Parameter<T>& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(params_.size()); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, int> index_;
};

/// One forward/backward pass: a tape plus lazily created parameter leaves.
/// Parameters for which `trainable` is false enter the tape as constants.
template <typename T>
class Graph {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  explicit Graph(const ParameterSet<T>& params, Predicate trainable = nullptr)
      : params_(params), trainable_(std::move(trainable)),
        bound_(static_cast<std::size_t>(params.size()), -1) {}

  ad::Tape<T> tape;

  ad::Var<T> param(int i) {
    int& id = bound_[static_cast<std::size_t>(i)];
    if (id < 0) {
      const auto& p = params_[i];
      const bool grad = trainable_ ? trainable_(p.name) : false;
      id = (grad ? tape.variable(p.value) : tape.constant(p.value)).id;
    }
    return ad::Var<T>{&tape, id};
  }

  ad::Var<T> constant(Matrix<T> v) { return tape.constant(std::move(v)); }
  ad::Var<T> variable(Matrix<T> v) { return tape.variable(std::move(v)); }

  /// Per-parameter gradients after tape.backward(); zeros for untouched blocks.
  std::vector<Matrix<T>> gradients() const {
    std::vector<Matrix<T>> out;
    out.reserve(bound_.size());
    for (std::size_t i = 0; i < bound_.size(); ++i) {
      const auto& v = params_[static_cast<int>(i)].value;
      if (bound_[i] >= 0 && tape.has_grad(bound_[i])) {
        out.push_back(tape.grad_ref(bound_[i]));
      } else {
        out.push_back(Matrix<T>::Zero(v.rows(), v.cols()));
      }
    }
    return out;
  }

  /// True when parameter i took part in the last backward pass.
  bool reached(int i) const {
    const int id = bound_[static_cast<std::size_t>(i)];
    return id >= 0 && tape.has_grad(id);
  }

  const ParameterSet<T>& params() const { return params_; }

 private:
  const ParameterSet<T>& params_;
  Predicate trainable_;
  std::vector<int> bound_;
};

inline bool has_prefix(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

// ---------------------------------------------------------------- initialisation

template <typename T>
Matrix<T> xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix<T> m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

// ---------------------------------------------------------------- layers

struct Linear {
  int weight = -1;
  int bias = -1;

  template <typename T>
  static Linear make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                     Eigen::Index out, std::mt19937_64& rng) {
    Linear l;
    l.weight = ps.add(name + ".w", xavier_uniform<T>(in, out, rng));
    l.bias = ps.add(name + ".b", Matrix<T>::Zero(1, out));
    return l;
  }

  template <typename T>
  ad::Var<T> operator()(Graph<T>& g, ad::Var<T> x) const {
    return ad::add_row(ad::matmul(x, g.param(weight)), g.param(bias));
  }
};

struct LayerNorm {
  int gain = -1;
  int bias = -1;

  template <typename T>
  static LayerNorm make(ParameterSet<T>& ps, const std::string& name, Eigen::Index width) {
    LayerNorm l;
    l.gain = ps.add(name + ".g", Matrix<T>::Ones(1, width));
    l.bias = ps.add(name + ".b", Matrix<T>::Zero(1, width));
    return l;
  }

  template <typename T>
  ad::Var<T> operator()(Graph<T>& g, ad::Var<T> x) const {
    return ad::layer_norm(x, g.param(gain), g.param(bias));
  }
};

/// Same-length temporal convolution: im2col followed by a dense projection.
struct Conv1d {
  Linear proj;
  int kernel = 1;
  ad::Padding padding = ad::Padding::kZero;

  template <typename T>
  static Conv1d make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                     Eigen::Index out, int kernel, ad::Padding padding, std::mt19937_64& rng) {
    Conv1d c;
    c.kernel = kernel;
    c.padding = padding;
    c.proj = Linear::make(ps, name, in * kernel, out, rng);
    return c;
  }

  template <typename T>
  ad::Var<T> operator()(Graph<T>& g, ad::Var<T> x) const {
    return proj(g, ad::im2col(x, kernel, padding));
  }
};

/// Additive attention mask allowing |i - j| <= half_width (all pairs when negative).
template <typename T>
Matrix<T> band_mask(Eigen::Index n, int half_width) {
  Matrix<T> m = Matrix<T>::Zero(n, n);
  if (half_width < 0) return m;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (std::abs(i - j) > half_width) m(i, j) = -std::numeric_limits<T>::infinity();
    }
  }
  return m;
}

struct MultiHeadAttention {
  Linear qkv;
  Linear out;
  int heads = 1;
  Eigen::Index width = 0;

  template <typename T>
  static MultiHeadAttention make(ParameterSet<T>& ps, const std::string& name, Eigen::Index width,
                                 int heads, std::mt19937_64& rng) {
    if (heads < 1 || width % heads != 0) {
      throw std::invalid_argument("attention width must be divisible by head count");
    }
    MultiHeadAttention a;
    a.heads = heads;
    a.width = width;
    a.qkv = Linear::make(ps, name + ".qkv", width, 3 * width, rng);
    a.out = Linear::make(ps, name + ".out", width, width, rng);
    return a;
  }

  template <typename T>
  ad::Var<T> operator()(Graph<T>& g, ad::Var<T> x, const Matrix<T>* mask = nullptr) const {
    const Eigen::Index dh = width / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    ad::Var<T> proj = qkv(g, x);
    std::vector<ad::Var<T>> per_head;
    per_head.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto q = ad::slice_cols(proj, h * dh, dh);
      auto k = ad::slice_cols(proj, width + h * dh, dh);
      auto v = ad::slice_cols(proj, 2 * width + h * dh, dh);
      auto p = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt), mask);
      per_head.push_back(ad::matmul(p, v));
    }
    return out(g, ad::concat_cols(per_head));
  }
};

/// Single-layer LSTM over a batch of variable-length sequences; returns the
/// hidden state after each sequence's last frame (N x hidden).
struct Lstm {
  int wx = -1, wh = -1, bias = -1;
  Eigen::Index hidden = 0;

  template <typename T>
  static Lstm make(ParameterSet<T>& ps, const std::string& name, Eigen::Index in,
                   Eigen::Index hidden, std::mt19937_64& rng) {
    Lstm l;
    l.hidden = hidden;
    l.wx = ps.add(name + ".wx", xavier_uniform<T>(in, 4 * hidden, rng));
    l.wh = ps.add(name + ".wh", xavier_uniform<T>(hidden, 4 * hidden, rng));
    Matrix<T> b = Matrix<T>::Zero(1, 4 * hidden);
    b.middleCols(hidden, hidden).setOnes();  // forget gate
    l.bias = ps.add(name + ".b", std::move(b));
    return l;
  }

  template <typename T>
  ad::Var<T> operator()(Graph<T>& g, const std::vector<ad::Var<T>>& seqs) const {
    if (seqs.empty()) throw ShapeError("Lstm: empty batch");
    const auto N = static_cast<Eigen::Index>(seqs.size());
    std::vector<ad::Var<T>> projected;
    Eigen::Index steps = 0;
    for (const auto& s : seqs) {
      if (s.rows() < 1) throw ShapeError("Lstm: empty sequence");
      projected.push_back(ad::matmul(s, g.param(wx)));
      steps = std::max(steps, s.rows());
    }
    ad::Var<T> h = g.constant(Matrix<T>::Zero(N, hidden));
    ad::Var<T> c = g.constant(Matrix<T>::Zero(N, hidden));
    for (Eigen::Index t = 0; t < steps; ++t) {
      std::vector<bool> active(static_cast<std::size_t>(N));
      for (Eigen::Index i = 0; i < N; ++i) active[static_cast<std::size_t>(i)] = t < seqs[static_cast<std::size_t>(i)].rows();
      ad::Var<T> xt = rows_at(g, projected, t);
      ad::Var<T> gates = ad::add_row(ad::add(xt, ad::matmul(h, g.param(wh))), g.param(bias));
      auto i_g = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
      auto f_g = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
      auto c_in = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
      auto o_g = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
      auto c_new = ad::add(ad::hadamard(f_g, c), ad::hadamard(i_g, c_in));
      auto h_new = ad::hadamard(o_g, ad::tanh(c_new));
      c = ad::select_rows(active, c_new, c);
      h = ad::select_rows(active, h_new, h);
    }
    return h;
  }

 private:
  // Row t of each sequence stacked into an N x C matrix; zero rows past the end.
  template <typename T>
  static ad::Var<T> rows_at(Graph<T>& g, const std::vector<ad::Var<T>>& seqs, Eigen::Index t) {
    const auto N = static_cast<Eigen::Index>(seqs.size());
    const Eigen::Index C = seqs[0].cols();
    Matrix<T> v = Matrix<T>::Zero(N, C);
    std::vector<int> ids;
    bool rg = false;
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto& s = seqs[static_cast<std::size_t>(i)];
      if (t < s.rows()) v.row(i) = s.value().row(t);
      ids.push_back(s.id);
      rg = rg || s.requires_grad();
    }
    return g.tape.push(std::move(v), rg, [ids, t](ad::Tape<T>& tp, int self) {
      const auto& gr = tp.grad_ref(self);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& x = tp.value(ids[i]);
        if (t >= x.rows() || !tp.requires_grad(ids[i])) continue;
        tp.accumulate_row(ids[i], t, gr.row(static_cast<Eigen::Index>(i)));
      }
    });
  }
};

}  // namespace muteswap
