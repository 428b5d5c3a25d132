#include "muteswap/losses.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using muteswap::Matrix;
namespace ad = muteswap::ad;

TEST(Reconstruction, Examples) {
  std::mt19937_64 rng(3);
  const Matrix<double> s = oracle::random_matrix(rng, 5, 80);
  EXPECT_EQ(muteswap::reconstruction_loss(s, s).scalar, 0.0);
  const Matrix<double> shifted = s.array() + 1.0;
  EXPECT_NEAR(muteswap::reconstruction_loss(shifted, s).scalar, 1.0, 1e-15);
  const Matrix<double> a = oracle::random_matrix(rng, 3, 4);
  const Matrix<double> b = oracle::random_matrix(rng, 3, 4);
  const auto v = muteswap::reconstruction_loss(a, b);
  EXPECT_NEAR(v.scalar, oracle::l1(oracle::to_mat(a), oracle::to_mat(b)), 1e-12);
  EXPECT_EQ(v.components.at("rec"), v.scalar);
}

TEST(Reconstruction, ShapeMismatchThrows) {
  EXPECT_THROW(muteswap::reconstruction_loss(Matrix<double>(3, 4), Matrix<double>(4, 3)), muteswap::ShapeError);
}

TEST(AfClip, SingleCandidateIsZero) {
  Matrix<double> a(1, 3), f(1, 3);
  a << 1, 2, 3;
  f << -1, 0.5, 2;
  EXPECT_NEAR(muteswap::afclip_loss(a, f).scalar, 0.0, 1e-15);
}

TEST(AfClip, IdentityCosineMatrix) {
  Matrix<double> a(2, 2);
  a << 1, 0, 0, 1;
  const auto v = muteswap::afclip_loss(a, a);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(expected, 0.3133, 5e-5);
  EXPECT_NEAR(v.scalar, expected, 1e-12);
  EXPECT_NEAR(v.components.at("a2v"), expected, 1e-12);
  EXPECT_NEAR(v.components.at("v2a"), expected, 1e-12);
}

TEST(AfClip, MatchesScalarOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 6, d = 2 + trial % 7;
    const Matrix<double> a = oracle::random_matrix(rng, n, d);
    const Matrix<double> f = oracle::random_matrix(rng, n, d);
    const auto ref = oracle::afclip(oracle::to_mat(a), oracle::to_mat(f));
    const auto got = muteswap::afclip_loss(a, f);
    EXPECT_LT(oracle::rel_diff(got.scalar, ref[0]), 1e-12);
    EXPECT_LT(oracle::rel_diff(got.components.at("a2v"), ref[1]), 1e-12);
    EXPECT_LT(oracle::rel_diff(got.components.at("v2a"), ref[2]), 1e-12);
  }
}

TEST(AfClip, Temperature) {
  std::mt19937_64 rng(6);
  const Matrix<double> a = oracle::random_matrix(rng, 4, 3);
  const Matrix<double> f = oracle::random_matrix(rng, 4, 3);
  EXPECT_LT(oracle::rel_diff(muteswap::afclip_loss(a, f, 0.3).scalar,
                             oracle::afclip(oracle::to_mat(a), oracle::to_mat(f), 0.3)[0]),
            1e-12);
  EXPECT_THROW(muteswap::afclip_loss(a, f, 0.0), std::invalid_argument);
}

TEST(AfClip, SymmetricInRoles) {
  std::mt19937_64 rng(7);
  const Matrix<double> a = oracle::random_matrix(rng, 5, 4);
  const Matrix<double> f = oracle::random_matrix(rng, 5, 4);
  EXPECT_NEAR(muteswap::afclip_loss(a, f).scalar, muteswap::afclip_loss(f, a).scalar, 1e-14);
}

TEST(AfClip, JointPermutationAndRowScaleInvariance) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix<double> a = oracle::random_matrix(rng, 6, 5);
    const Matrix<double> f = oracle::random_matrix(rng, 6, 5);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix<double> pa(6, 5), pf(6, 5);
    for (int i = 0; i < 6; ++i) {
      pa.row(i) = a.row(perm[i]);
      pf.row(i) = f.row(perm[i]);
    }
    const double base = muteswap::afclip_loss(a, f).scalar;
    EXPECT_NEAR(muteswap::afclip_loss(pa, pf).scalar, base, 1e-12);
    Matrix<double> sa = a;
    std::uniform_real_distribution<double> u(0.01, 100.0);
    for (int i = 0; i < 6; ++i) sa.row(i) *= u(rng);
    EXPECT_NEAR(muteswap::afclip_loss(sa, f).scalar, base, 1e-12);
  }
}

TEST(AfClip, LowerBound) {
  std::mt19937_64 rng(9);
  for (int n = 2; n <= 8; ++n) {
    const double bound = -std::log(std::exp(1.0) / (std::exp(1.0) + (n - 1) * std::exp(-1.0)));
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix<double> a = oracle::random_matrix(rng, n, 6);
      const Matrix<double> f = oracle::random_matrix(rng, n, 6);
      EXPECT_GT(muteswap::afclip_loss(a, f).scalar, bound);
    }
  }
  // Attained when positives have cosine 1 and negatives -1 (two antipodal pairs).
  Matrix<double> a(2, 1);
  a << 1, -1;
  EXPECT_NEAR(muteswap::afclip_loss(a, a).scalar,
              -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0))), 1e-12);
}

TEST(AfClip, ZeroNormRowThrows) {
  Matrix<double> a = Matrix<double>::Ones(3, 4);
  Matrix<double> f = Matrix<double>::Ones(3, 4);
  f.row(2).setZero();
  EXPECT_THROW(muteswap::afclip_loss(a, f), std::domain_error);
}

TEST(LossGradients, FiniteDifferences) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + trial % 3, d = 2 + trial % 7;
    const Matrix<double> a = oracle::random_matrix(rng, n, d);
    const Matrix<double> f = oracle::random_matrix(rng, n, d);
    ad::Tape<double> t;
    auto va = t.variable(a), vf = t.variable(f);
    t.backward(muteswap::afclip_loss(va, vf).total);
    auto fa = [&](const Matrix<double>& x) { return muteswap::afclip_loss(x, f).scalar; };
    auto ff = [&](const Matrix<double>& x) { return muteswap::afclip_loss(a, x).scalar; };
    EXPECT_LT(oracle::rel_error(t.grad(va), oracle::numeric_grad(fa, a)), 1e-6);
    EXPECT_LT(oracle::rel_error(t.grad(vf), oracle::numeric_grad(ff, f)), 1e-6);

    ad::Tape<double> t2;
    auto p = t2.variable(a);
    t2.backward(muteswap::reconstruction_loss(p, t2.constant(f)));
    auto fr = [&](const Matrix<double>& x) { return muteswap::reconstruction_loss(x, f).scalar; };
    EXPECT_LT(oracle::rel_error(t2.grad(p), oracle::numeric_grad(fr, a)), 1e-6);
  }
}
