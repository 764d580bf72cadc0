#include <random>

#include <gtest/gtest.h>

#include "dense_oracles.hpp"
#include "mvmrf/mrf_precision.hpp"
#include "mvmrf/sparse_chol.hpp"

using namespace mvmrf;

namespace {

SparsePrecision dense2(double a, double b, double c) {
  Eigen::MatrixXd m(2, 2);
  m << a, b, b, c;
  return SparsePrecision::from_dense(m);
}

SparsePrecision example4() {
  StackedLattice s(build_grid_lattice(2, 1), 2);
  auto d = DependenceParams::zeros(2);
  d.set_rho(0, 1, 0.1);
  d.phi << 0.2, 0.05, 0.15, 0.3;
  return assemble_precision(s, d);
}

std::shared_ptr<const SymbolicFactor> analyse(const SparsePrecision& q, Index block = 1) {
  return std::make_shared<const SymbolicFactor>(symbolic_factorize(q, compute_ordering(q.pattern(), block)));
}

Eigen::MatrixXd permuted(const Eigen::MatrixXd& a, const Permutation& perm) {
  const Index n = a.rows();
  Eigen::MatrixXd out(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) out(i, j) = a(perm[i], perm[j]);
  return out;
}

}  // namespace

TEST(Ordering, IdentityPatternGivesIdentity) {
  const auto q = SparsePrecision::from_dense(Eigen::MatrixXd::Identity(6, 6));
  EXPECT_EQ(compute_ordering(q.pattern()), identity_permutation(6));
}

TEST(Ordering, PathGraphHasNoFill) {
  StackedLattice s(build_grid_lattice(5, 1), 1);
  auto d = DependenceParams::zeros(1);
  d.phi(0, 0) = 0.3;
  const auto q = assemble_precision(s, d);
  const auto perm = compute_ordering(q.pattern());
  EXPECT_TRUE(is_permutation(perm, 5));
  EXPECT_EQ(symbolic_factorize(q, perm).fill_in(), 0);
  EXPECT_EQ(oracle::factor_nnz(q.to_dense(), perm), 9);
}

TEST(Ordering, NoWorseThanNaturalOnLattice) {
  StackedLattice s(build_grid_lattice(10, 10), 1);
  auto d = DependenceParams::zeros(1);
  d.phi(0, 0) = 0.2;
  const auto q = assemble_precision(s, d);
  const auto md = symbolic_factorize(q, compute_ordering(q.pattern()));
  const auto natural = symbolic_factorize(q, identity_permutation(q.dim()));
  EXPECT_LE(md.fill_in(), natural.fill_in());
  // structural counts agree with dense boolean elimination
  EXPECT_EQ(md.nnz_l(), oracle::factor_nnz(q.to_dense(), md.perm));
  EXPECT_EQ(natural.nnz_l(), oracle::factor_nnz(q.to_dense(), natural.perm));
}

TEST(Ordering, DeterministicAndLocationMajor) {
  StackedLattice s(build_grid_lattice(7, 5), 3);
  PrecisionAssembler assembler(s);
  const auto a = compute_ordering(*assembler.pattern(), 3);
  const auto b = compute_ordering(*assembler.pattern(), 3);
  EXPECT_EQ(a, b);
  ASSERT_TRUE(is_permutation(a, s.dim()));
  for (std::size_t k = 0; k < a.size(); k += 3) {
    EXPECT_EQ(a[k] % 3, 0);
    EXPECT_EQ(a[k + 1], a[k] + 1);
    EXPECT_EQ(a[k + 2], a[k] + 2);
  }
}

TEST(Symbolic, IdentityPatternIsDiagonal) {
  const auto q = SparsePrecision::from_dense(Eigen::MatrixXd::Identity(4, 4));
  const auto s = symbolic_factorize(q, identity_permutation(4));
  EXPECT_EQ(s.nnz_l(), 4);
  for (Index j = 0; j < 4; ++j) EXPECT_EQ(s.l_row[s.l_ptr[j]], j);
}

TEST(Symbolic, FactorPatternContainsPermutedLowerTriangle) {
  const auto q = example4();
  const auto s = symbolic_factorize(q, compute_ordering(q.pattern()));
  const Eigen::MatrixXd c = permuted(q.to_dense(), s.perm);
  for (Index j = 0; j < 4; ++j)
    for (Index i = j; i < 4; ++i) {
      if (c(i, j) == 0.0) continue;
      bool found = false;
      for (Index p = s.l_ptr[j]; p < s.l_ptr[j + 1]; ++p) found |= s.l_row[p] == i;
      EXPECT_TRUE(found) << i << "," << j;
    }
}

TEST(Symbolic, DependsOnlyOnPattern) {
  StackedLattice s(build_grid_lattice(4, 3), 2);
  PrecisionAssembler assembler(s);
  auto d1 = DependenceParams::zeros(2);
  auto d2 = DependenceParams::zeros(2);
  d1.phi << 0.1, 0.02, 0.03, 0.1;
  d2.phi << 0.2, -0.05, 0.01, 0.15;
  d2.tau2 << 2.0, 0.5;
  const auto q1 = assembler.assemble(d1);
  const auto q2 = assembler.assemble(d2);
  EXPECT_EQ(symbolic_factorize(q1, compute_ordering(q1.pattern(), 2)),
            symbolic_factorize(q2, compute_ordering(q2.pattern(), 2)));
}

TEST(Numeric, IdentityGivesIdentity) {
  const auto q = SparsePrecision::from_dense(Eigen::MatrixXd::Identity(5, 5));
  const auto f = factorize(q);
  ASSERT_TRUE(f);
  EXPECT_TRUE(f->dense_l().isIdentity(0.0));
}

TEST(Numeric, TwoByTwoByHand) {
  const auto q = dense2(4, 2, 5);
  const auto f = numeric_factorize(std::make_shared<const SymbolicFactor>(symbolic_factorize(q, identity_permutation(2))), q);
  ASSERT_TRUE(f);
  Eigen::MatrixXd expected(2, 2);
  expected << 2, 0, 1, 2;
  EXPECT_EQ(f->dense_l(), expected);
}

TEST(Numeric, IndefiniteIsSignalledNotThrown) {
  const auto q = dense2(1, 2, 1);
  EXPECT_FALSE(factorize(q).has_value());
  EXPECT_FALSE(check_positive_definite(q));
}

TEST(Numeric, PatternMismatchThrows) {
  const auto a = dense2(4, 2, 5);
  const auto b = SparsePrecision::from_dense(Eigen::MatrixXd::Identity(2, 2));
  EXPECT_THROW(numeric_factorize(analyse(a), b), std::invalid_argument);
}

TEST(Numeric, ReuseIsBitwiseIdenticalToFromScratch) {
  StackedLattice s(build_grid_lattice(6, 5), 2);
  PrecisionAssembler assembler(s);
  auto d1 = DependenceParams::zeros(2);
  d1.phi << 0.1, 0.02, 0.03, 0.1;
  auto d2 = d1;
  d2.set_rho(0, 1, -0.2);
  d2.phi << 0.2, 0.08, 0.01, 0.15;
  d2.tau2 << 1.7, 0.4;
  const auto q1 = assembler.assemble(d1);
  const auto q2 = assembler.assemble(d2);
  const auto cached = analyse(q1, 2);
  ASSERT_TRUE(numeric_factorize(cached, q1));
  const auto reused = numeric_factorize(cached, q2);
  const auto fresh = numeric_factorize(
      std::make_shared<const SymbolicFactor>(symbolic_factorize(q2, compute_ordering(q2.pattern(), 2))), q2);
  ASSERT_TRUE(reused && fresh);
  EXPECT_EQ(reused->values(), fresh->values());
}

TEST(Numeric, FactorizeMultiplyRoundTrip) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd a = oracle::random_spd(3 + trial * 2, 0.15, rng);
    const auto q = SparsePrecision::from_dense(a);
    const auto f = factorize(q);
    ASSERT_TRUE(f);
    const Eigen::MatrixXd l = f->dense_l();
    const Eigen::MatrixXd c = permuted(a, f->symbolic().perm);
    EXPECT_LE((c - l * l.transpose()).cwiseAbs().maxCoeff(), 1e-10 * a.cwiseAbs().maxCoeff());
    EXPECT_GT(l.diagonal().minCoeff(), 0.0);
  }
}

TEST(Solve, Examples) {
  const auto ident = SparsePrecision::from_dense(Eigen::MatrixXd::Identity(3, 3));
  Eigen::VectorXd r(3);
  r << 1.5, -2, 7;
  EXPECT_EQ(solve(*factorize(ident), r), r);

  Eigen::VectorXd rhs(2);
  rhs << 8, 9;
  const auto x = solve(*factorize(dense2(4, 2, 5)), rhs);
  EXPECT_NEAR(x[0], 1.375, 1e-15);
  EXPECT_NEAR(x[1], 1.25, 1e-15);
  EXPECT_THROW(solve(*factorize(dense2(4, 2, 5)), r), std::invalid_argument);
}

TEST(Solve, RecoversKnownSolution) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> z;
  for (Index dim = 1; dim <= 50; dim += 7) {
    const Eigen::MatrixXd a = oracle::random_spd(dim, 0.2, rng);
    Eigen::VectorXd x0(dim);
    for (Index k = 0; k < dim; ++k) x0[k] = z(rng);
    const Eigen::VectorXd rhs = a * x0;
    const auto x = solve(*factorize(SparsePrecision::from_dense(a)), rhs);
    EXPECT_LT((x - x0).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, x0.cwiseAbs().maxCoeff()));
    EXPECT_LE((a * x - rhs).cwiseAbs().maxCoeff(), 1e-8 * rhs.cwiseAbs().maxCoeff());
  }
}

TEST(LogDet, Examples) {
  EXPECT_EQ(log_det(*factorize(SparsePrecision::from_dense(Eigen::MatrixXd::Identity(4, 4)))), 0.0);
  EXPECT_NEAR(log_det(*factorize(dense2(4, 2, 5))), std::log(16.0), 1e-14);
  EXPECT_NEAR(std::log(16.0), 2.7725887, 1e-7);
}

TEST(LogDet, MatchesDenseOracleAndScalesAdditively) {
  std::mt19937_64 rng(23);
  for (Index dim : {5, 20, 60, 100}) {
    const Eigen::MatrixXd a = oracle::random_spd(dim, 0.1, rng);
    const auto q = SparsePrecision::from_dense(a);
    const double ld = log_det(*factorize(q));
    const double ref = oracle::log_det_spd(a);
    EXPECT_NEAR(ld, ref, 1e-8 * std::abs(ref));
    for (double c : {0.5, 2.0, 10.0}) {
      const auto qc = q.scaled_plus_diagonal(c, Eigen::VectorXd::Zero(dim));
      EXPECT_NEAR(log_det(*factorize(qc)), static_cast<double>(dim) * std::log(c) + ld, 1e-10 * std::max(1.0, std::abs(ld)));
    }
  }
}

TEST(SampleGmrf, DiagonalVariance) {
  const auto q = SparsePrecision::from_dense(Eigen::MatrixXd::Identity(1, 1) * 4.0);
  const auto f = *factorize(q);
  std::mt19937_64 rng(8);
  const int draws = 100000;
  double s2 = 0.0;
  for (int t = 0; t < draws; ++t) {
    const double x = sample_gmrf(f, Eigen::VectorXd::Zero(1), rng)[0];
    s2 += x * x;
  }
  const double var = s2 / draws;
  // var of the estimator: 2 sigma^4 / N
  const double se = std::sqrt(2.0 * 0.25 * 0.25 / draws);
  EXPECT_NEAR(var, 0.25, 3.0 * se);
}

TEST(SampleGmrf, WhitenedSamplesHaveIdentityCovariance) {
  StackedLattice s(build_grid_lattice(3, 2), 2);
  auto d = DependenceParams::zeros(2);
  d.set_rho(0, 1, -0.2);
  d.phi << 0.15, 0.1, 0.05, 0.15;
  d.tau2 << 1.5, 0.5;
  const auto q = assemble_precision(s, d);
  const auto f = *factorize(q, 2);
  const Eigen::MatrixXd l = f.dense_l();
  const Index n = q.dim();
  std::mt19937_64 rng(31);
  Eigen::VectorXd mean = Eigen::VectorXd::LinSpaced(n, -1.0, 1.0);
  const int draws = 40000;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (int t = 0; t < draws; ++t) {
    const Eigen::VectorXd x = sample_gmrf(f, mean, rng) - mean;
    Eigen::VectorXd px(n);
    for (Index k = 0; k < n; ++k) px[k] = x[f.symbolic().perm[k]];
    const Eigen::VectorXd w = l.transpose() * px;
    cov += w * w.transpose();
  }
  cov /= draws;
  // entries of the sample covariance of white noise have sd ~ 1/sqrt(N) (off-diag), sqrt(2/N) (diag)
  const double tol = 5.0 * std::sqrt(2.0 / draws);
  EXPECT_LT((cov - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff(), tol);
}
