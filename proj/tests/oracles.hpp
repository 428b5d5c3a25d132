#pragma once

// Independent reference computations for tests: plain loops over
// std::vector<double>, no shared code with the library beyond Matrix I/O.

#include "muteswap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const muteswap::Matrix<double>& m) {
  Mat out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

inline muteswap::Matrix<double> random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  muteswap::Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double l1(const Mat& a, const Mat& b) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      s += std::fabs(a[i][j] - b[i][j]);
      ++n;
    }
  return s / static_cast<double>(n);
}

inline double cos_sim(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

/// Returns {total, a2v, v2a}.
inline std::vector<double> afclip(const Mat& audio, const Mat& face, double temperature = 1.0) {
  const std::size_t n = audio.size();
  Mat logit(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) logit[i][j] = cos_sim(audio[i], face[j]) / temperature;
  double a2v = 0, v2a = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // Shift by the maximum so a single candidate gives exactly zero.
    double row_max = logit[i][0], col_max = logit[0][i];
    for (std::size_t j = 0; j < n; ++j) {
      row_max = std::max(row_max, logit[i][j]);
      col_max = std::max(col_max, logit[j][i]);
    }
    double row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += std::exp(logit[i][j] - row_max);
      col += std::exp(logit[j][i] - col_max);
    }
    a2v -= (logit[i][i] - row_max) - std::log(row);
    v2a -= (logit[i][i] - col_max) - std::log(col);
  }
  a2v /= static_cast<double>(n);
  v2a /= static_cast<double>(n);
  return {0.5 * (a2v + v2a), a2v, v2a};
}

inline double loglik_row(const std::vector<double>& x, const std::vector<double>& mu, const std::vector<double>& lv) {
  double s = 0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    s += 0.5 * (-(x[d] - mu[d]) * (x[d] - mu[d]) / std::exp(lv[d]) - lv[d]);
  }
  return s;
}

inline std::vector<double> loglik(const Mat& x, const Mat& mu, const Mat& lv) {
  std::vector<double> out;
  for (std::size_t i = 0; i < x.size(); ++i) out.push_back(loglik_row(x[i], mu[i], lv[i]));
  return out;
}

inline double e_step(const Mat& x, const Mat& mu, const Mat& lv) {
  double s = 0;
  for (double v : loglik(x, mu, lv)) s += v;
  return -s / static_cast<double>(x.size());
}

inline double mi_sampled(const Mat& x, const Mat& mu, const Mat& lv, const std::vector<int>& k) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += loglik_row(x[i], mu[i], lv[i]) - loglik_row(x[static_cast<std::size_t>(k[i])], mu[i], lv[i]);
  }
  return s / static_cast<double>(x.size());
}

/// Brute-force EER: counts every candidate threshold directly (O(n^2)),
/// then intersects the polyline through the (FPR, FNR) points with FPR = FNR.
inline double eer(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::set<double> thr(pos.begin(), pos.end());
  thr.insert(neg.begin(), neg.end());
  thr.insert(std::numeric_limits<double>::infinity());
  std::vector<double> fpr, fnr;
  for (double t : thr) {
    int fa = 0, fr = 0;
    for (double s : neg) fa += s >= t;
    for (double s : pos) fr += s < t;
    fpr.push_back(static_cast<double>(fa) / static_cast<double>(neg.size()));
    fnr.push_back(static_cast<double>(fr) / static_cast<double>(pos.size()));
  }
  for (std::size_t i = 0; i < fpr.size(); ++i) {
    if (fpr[i] == fnr[i]) return fpr[i];
    if (fpr[i] < fnr[i]) {
      const double da = fpr[i - 1] - fnr[i - 1];
      const double db = fpr[i] - fnr[i];
      const double s = da / (da - db);
      return fpr[i - 1] + s * (fpr[i] - fpr[i - 1]);
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

/// Central finite differences of f at x, one coordinate at a time.
inline muteswap::Matrix<double> numeric_grad(const std::function<double(const muteswap::Matrix<double>&)>& f,
                                             muteswap::Matrix<double> x, double h = 1e-6) {
  muteswap::Matrix<double> g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double rel_error(const muteswap::Matrix<double>& a, const muteswap::Matrix<double>& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / scale;
}

inline double rel_diff(double a, double b) {
  const double scale = std::max({std::fabs(a), std::fabs(b), 1e-300});
  return std::fabs(a - b) / scale;
}

}  // namespace oracle
