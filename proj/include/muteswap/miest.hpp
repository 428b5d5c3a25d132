#pragma once

// Variational Gaussian estimator q(identity | content) and the two sampled
// CLUB objectives built on it: the estimator's negative log-likelihood
// (fitted with the main model frozen) and the mutual-information upper bound
// (minimised through the main model with the estimator frozen).

#include "muteswap/nn.hpp"

#include <random>
#include <vector>

namespace muteswap {

struct MiEstimatorConfig {
  int input_dim = 128;  // width of the content sequence
  int target_dim = 128; // width of the identity embedding
  int hidden = 64;
  double logvar_min = -8.0;
  double logvar_max = 8.0;
};

template <typename T>
struct GaussianParams {
  ad::Var<T> mean;    // N x target_dim
  ad::Var<T> logvar;  // N x target_dim, clamped
};

/// Parameters live in the shared ParameterSet under the "miest." prefix.
class MiEstimator {
 public:
  static constexpr const char* kPrefix = "miest.";

  MiEstimator() = default;

  template <typename T>
  MiEstimator(ParameterSet<T>& ps, const MiEstimatorConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    lstm_ = Lstm::make(ps, "miest.lstm", cfg.input_dim, cfg.hidden, rng);
    mu0_ = Linear::make(ps, "miest.mu.fc0", cfg.hidden, cfg.hidden, rng);
    mu1_ = Linear::make(ps, "miest.mu.fc1", cfg.hidden, cfg.target_dim, rng);
    lv0_ = Linear::make(ps, "miest.logvar.fc0", cfg.hidden, cfg.hidden, rng);
    lv1_ = Linear::make(ps, "miest.logvar.fc1", cfg.hidden, cfg.target_dim, rng);
  }

  const MiEstimatorConfig& config() const { return cfg_; }

  /// Summarises each content sequence by the LSTM's final hidden state and
  /// maps it to a diagonal Gaussian over the identity embedding.
  template <typename T>
  GaussianParams<T> predict(Graph<T>& g, const std::vector<ad::Var<T>>& contents) const {
    ad::Var<T> h = lstm_(g, contents);
    ad::Var<T> mu = mu1_(g, ad::silu(mu0_(g, h)));
    ad::Var<T> lv = lv1_(g, ad::silu(lv0_(g, h)));
    lv = ad::clamp(lv, static_cast<T>(cfg_.logvar_min), static_cast<T>(cfg_.logvar_max));
    return {mu, lv};
  }

 private:
  MiEstimatorConfig cfg_;
  Lstm lstm_;
  Linear mu0_, mu1_, lv0_, lv1_;
};

inline bool is_estimator_param(const std::string& name) {
  return has_prefix(name, MiEstimator::kPrefix);
}

/// Per-row log-likelihood without the 2*pi constant:
/// sum_d 0.5 * (-(x - mu)^2 / exp(logvar) - logvar). Returns N x 1.
template <typename T>
ad::Var<T> loglik(ad::Var<T> x, ad::Var<T> mean, ad::Var<T> logvar) {
  auto resid2 = ad::square(ad::sub(x, mean));
  auto precision = ad::exp(ad::scale(logvar, T(-1)));
  auto per_dim = ad::scale(ad::add(ad::hadamard(resid2, precision), logvar), T(-0.5));
  return ad::row_sum(per_dim);
}

/// Estimator objective: -(1/N) sum_i log q(x_i | c_i).
template <typename T>
ad::Var<T> e_step_loss(ad::Var<T> x, const GaussianParams<T>& q) {
  if (x.rows() < 1) throw std::invalid_argument("e_step_loss: empty batch");
  return ad::scale(ad::mean(loglik(x, q.mean, q.logvar)), T(-1));
}

/// Sampled upper bound: (1/N) sum_i [log q(x_i | c_i) - log q(x_{k_i} | c_i)].
template <typename T>
ad::Var<T> mi_upper_bound(ad::Var<T> x, const GaussianParams<T>& q,
                          const std::vector<int>& negatives) {
  if (static_cast<Eigen::Index>(negatives.size()) != x.rows()) {
    throw std::invalid_argument("mi_upper_bound: one negative index per row required");
  }
  auto positive = loglik(x, q.mean, q.logvar);
  auto negative = loglik(ad::gather_rows(x, negatives), q.mean, q.logvar);
  return ad::mean(ad::sub(positive, negative));
}

/// Negative indices drawn uniformly from [0, n), self-pairing allowed.
inline std::vector<int> sample_negatives(int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, n - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& k : out) k = u(rng);
  return out;
}

/// Full-pairing bound (1/N) sum_i [log q(x_i|c_i) - (1/N) sum_j log q(x_j|c_i)];
/// the expectation of mi_upper_bound over the negative draw.
template <typename T>
T mi_all_pairs(const Matrix<T>& x, const Matrix<T>& mean, const Matrix<T>& logvar) {
  const Eigen::Index N = x.rows();
  T total = 0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const auto prec = (-logvar.row(i).array()).exp();
    const T pos = T(0.5) * (-(x.row(i) - mean.row(i)).array().square() * prec - logvar.row(i).array()).sum();
    T neg = 0;
    for (Eigen::Index j = 0; j < N; ++j) {
      neg += T(0.5) * (-(x.row(j) - mean.row(i)).array().square() * prec - logvar.row(i).array()).sum();
    }
    total += pos - neg / static_cast<T>(N);
  }
  return total / static_cast<T>(N);
}

}  // namespace muteswap
