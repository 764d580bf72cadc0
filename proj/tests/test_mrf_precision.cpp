#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "dense_oracles.hpp"
#include "mvmrf/mrf_precision.hpp"

using namespace mvmrf;

namespace {

// Regression value recorded from the first run (seed 99, 1000 draws).
constexpr int kFrozenWideBoxAccepts = 3;

DependenceParams example_params() {
  DependenceParams d = DependenceParams::zeros(2);
  d.set_rho(0, 1, 0.1);
  d.phi << 0.2, 0.05, 0.15, 0.3;
  return d;
}

// Random (rho, phi, tau2) that pass the PD check.
DependenceParams random_valid(const StackedLattice& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> tau(0.3, 3.0);
  Eigen::VectorXd tau2(s.p());
  for (Index j = 0; j < s.p(); ++j) tau2[j] = tau(rng);
  return sample_valid_params_uniform(s, ParamBox::uniform(s.p(), -0.3, 0.3), tau2, rng, 10000);
}

}  // namespace

TEST(AssemblePrecision, HandAssembledFourByFour) {
  StackedLattice s(build_grid_lattice(2, 1), 2);
  const auto q = assemble_precision(s, example_params());
  Eigen::MatrixXd expected(4, 4);
  expected << 1, -0.1, -0.2, -0.15,  //
      -0.1, 1, -0.05, -0.3,          //
      -0.2, -0.05, 1, -0.1,          //
      -0.15, -0.3, -0.1, 1;
  const Eigen::MatrixXd dense = q.to_dense();
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 4; ++c) EXPECT_EQ(dense(r, c), expected(r, c)) << r << "," << c;
  EXPECT_GT(oracle::min_eigenvalue(dense), 0.0);
  EXPECT_TRUE(check_positive_definite(q));
}

TEST(AssemblePrecision, NoDependenceIsIdentity) {
  StackedLattice s(build_grid_lattice(3, 4), 3);
  const auto q = assemble_precision(s, DependenceParams::zeros(3));
  EXPECT_TRUE(q.to_dense().isIdentity(0.0));
  EXPECT_TRUE(check_positive_definite(q));
}

TEST(AssemblePrecision, UnivariateCaseIsCar) {
  const auto g = build_grid_lattice(4, 3);
  StackedLattice s(g, 1);
  DependenceParams d = DependenceParams::zeros(1);
  d.phi(0, 0) = 0.2;
  d.tau2[0] = 2.5;
  const Eigen::MatrixXd q = assemble_precision(s, d).to_dense();
  EXPECT_LT((q - oracle::univariate_car(g, 0.2, 2.5)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(AssemblePrecision, MatchesKroneckerOracle) {
  std::mt19937_64 rng(11);
  for (auto [nx, ny, p] : {std::tuple<Index, Index, Index>{2, 2, 2}, {3, 3, 2}, {4, 2, 3}, {3, 1, 4}}) {
    const auto g = build_grid_lattice(nx, ny);
    StackedLattice s(g, p);
    const auto d = random_valid(s, rng);
    const auto q = assemble_precision(s, d);
    const Eigen::MatrixXd ref = oracle::stacked_precision(g, d.rho, d.phi, d.tau2);
    EXPECT_LT((q.to_dense() - ref).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(AssemblePrecision, StructureAndSymmetry) {
  std::mt19937_64 rng(5);
  for (Index p = 1; p <= 3; ++p) {
    StackedLattice s(build_grid_lattice(5, 4), p);
    PrecisionAssembler assembler(s);
    const auto q = assembler.assemble(random_valid(s, rng));
    EXPECT_EQ(q.nnz(), assembler.expected_nnz());
    EXPECT_EQ(q.nnz(), s.n() * p + s.n() * p * (p - 1) + 2 * 31 * p * p);
    const Eigen::MatrixXd dense = q.to_dense();
    EXPECT_EQ((dense - dense.transpose()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(AssemblePrecision, Errors) {
  StackedLattice s(build_grid_lattice(2, 2), 2);
  EXPECT_THROW(assemble_precision(s, DependenceParams::zeros(3)), std::invalid_argument);
  auto d = DependenceParams::zeros(2);
  d.tau2[1] = 0.0;
  EXPECT_THROW(assemble_precision(s, d), std::invalid_argument);
  d.tau2[1] = -1.0;
  EXPECT_THROW(assemble_precision(s, d), std::invalid_argument);
}

TEST(AssemblePrecision, CorrelationStructureInvariantToCommonTauScaling) {
  StackedLattice s(build_grid_lattice(3, 3), 2);
  auto d = example_params();
  d.tau2 << 0.7, 2.0;
  auto scaled = d;
  scaled.tau2 *= 4.5;
  auto corr = [](const SparsePrecision& q, const Eigen::VectorXd& tau2, Index p) {
    const Index dim = q.dim();
    Eigen::VectorXd half(dim);
    for (Index a = 0; a < dim; ++a) half[a] = std::sqrt(tau2[a % p]);
    return Eigen::MatrixXd(half.asDiagonal() * q.to_dense() * half.asDiagonal());
  };
  const Eigen::MatrixXd a = corr(assemble_precision(s, d), d.tau2, 2);
  const Eigen::MatrixXd b = corr(assemble_precision(s, scaled), scaled.tau2, 2);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((a - oracle::stacked_precision(s.grid(), d.rho, d.phi, Eigen::VectorXd::Ones(2))).cwiseAbs().maxCoeff(),
            1e-14);
}

TEST(AssemblePrecision, SymmetricCrossDependenceGivesSymmetricBlocks) {
  StackedLattice s(build_grid_lattice(3, 2), 2);
  auto d = example_params();
  d.phi(1, 0) = d.phi(0, 1);
  const Eigen::MatrixXd q = assemble_precision(s, d).to_dense();
  for (const auto& e : edge_list(s.grid())) {
    const Eigen::MatrixXd block = q.block(e.hi * 2, e.lo * 2, 2, 2);
    EXPECT_EQ((block - block.transpose()).cwiseAbs().maxCoeff(), 0.0);
  }
}

// The conditional mean of every component read off Q must equal the
// conditional specification built from the b coefficients.
TEST(AssemblePrecision, ConditionalSpecificationEquivalence) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> z;
  for (auto [nx, ny, p] : {std::tuple<Index, Index, Index>{2, 2, 2}, {4, 4, 2}, {3, 3, 3}, {4, 2, 4}, {8, 4, 1}, {2, 1, 2}}) {
    StackedLattice s(build_grid_lattice(nx, ny), p);
    ASSERT_LE(s.dim(), 32);
    for (int trial = 0; trial < 5; ++trial) {
      const auto d = random_valid(s, rng);
      const auto q = assemble_precision(s, d);
      Eigen::VectorXd y(s.dim()), mu(s.dim());
      for (Index a = 0; a < s.dim(); ++a) {
        y[a] = z(rng);
        mu[a] = z(rng);
      }
      for (Index i = 0; i < s.n(); ++i) {
        for (Index j = 0; j < p; ++j) {
          const Index a = s.flat_index(i, j);
          const double qaa = q.coeff(a, a);
          EXPECT_DOUBLE_EQ(1.0 / qaa, d.tau2[j]);
          double from_q = 0.0;
          for (Index b = 0; b < s.dim(); ++b)
            if (b != a) from_q -= q.coeff(a, b) * (y[b] - mu[b]);
          from_q = mu[a] + from_q / qaa;

          double spec = mu[a];
          for (Index k : s.grid().neighbors(i)) {
            const auto side = i > k ? EdgeSide::FromHigher : EdgeSide::FromLower;
            spec += conditional_coefficient(d, CoefficientKind::WithinLayer, j, j) * (y[k * p + j] - mu[k * p + j]);
            for (Index l = 0; l < p; ++l)
              if (l != j)
                spec += conditional_coefficient(d, CoefficientKind::Cross, j, l, side) * (y[k * p + l] - mu[k * p + l]);
          }
          for (Index l = 0; l < p; ++l)
            if (l != j)
              spec += conditional_coefficient(d, CoefficientKind::WithinLocation, j, l) * (y[i * p + l] - mu[i * p + l]);
          EXPECT_NEAR(from_q, spec, 1e-12 * std::max(1.0, std::abs(spec)));
        }
      }
    }
  }
}

TEST(ConditionalCoefficient, Examples) {
  auto d = DependenceParams::zeros(2);
  d.set_rho(0, 1, 0.1);
  EXPECT_DOUBLE_EQ(conditional_coefficient(d, CoefficientKind::WithinLocation, 0, 1), 0.1);

  d.tau2 << 4.0, 1.0;
  d.phi(0, 1) = 0.05;
  EXPECT_DOUBLE_EQ(conditional_coefficient(d, CoefficientKind::Cross, 0, 1), 0.1);

  const auto zero = DependenceParams::zeros(3);
  for (Index j = 0; j < 3; ++j)
    for (Index l = 0; l < 3; ++l) {
      EXPECT_EQ(conditional_coefficient(zero, CoefficientKind::Cross, j, l), 0.0);
      if (j != l) {
        EXPECT_EQ(conditional_coefficient(zero, CoefficientKind::WithinLocation, j, l), 0.0);
      }
    }
  EXPECT_EQ(conditional_coefficient(zero, CoefficientKind::WithinLayer, 1, 1), 0.0);
  EXPECT_THROW(conditional_coefficient(d, CoefficientKind::WithinLocation, 1, 1), std::invalid_argument);
  EXPECT_THROW(conditional_coefficient(d, CoefficientKind::Cross, 0, 2), std::invalid_argument);
}

TEST(CheckPositiveDefinite, PathWithStrongDependenceFails) {
  StackedLattice s(build_grid_lattice(3, 1), 1);
  auto d = DependenceParams::zeros(1);
  d.phi(0, 0) = 0.9;  // min eigenvalue 1 - 0.9*sqrt(2) < 0
  EXPECT_LT(oracle::min_eigenvalue(oracle::univariate_car(s.grid(), 0.9, 1.0)), 0.0);
  EXPECT_FALSE(check_positive_definite(assemble_precision(s, d)));
  d.phi(0, 0) = 0.7;  // 1 - 0.7*sqrt(2) > 0
  EXPECT_TRUE(check_positive_definite(assemble_precision(s, d)));
}

TEST(CheckPositiveDefinite, AgreesWithEigenvaluesNearBoundary) {
  // lambda_max of the 4x4 grid adjacency is 2*(2cos(pi/5)) = 3.236..
  StackedLattice s(build_grid_lattice(4, 4), 1);
  const double critical = 1.0 / (4.0 * std::cos(std::numbers::pi / 5.0));
  for (double phi : {critical - 1e-6, critical + 1e-6}) {
    auto d = DependenceParams::zeros(1);
    d.phi(0, 0) = phi;
    const auto q = assemble_precision(s, d);
    EXPECT_EQ(check_positive_definite(q), oracle::min_eigenvalue(q.to_dense()) > 0.0) << phi;
  }
}

TEST(SampleValidParams, SmallBoxAlwaysAccepted) {
  StackedLattice s(build_grid_lattice(2, 2), 1);
  std::mt19937_64 rng(1);
  ParamBox box = ParamBox::uniform(1, -0.24, 0.24);
  for (int t = 0; t < 200; ++t) {
    // max_tries = 1: any rejection would throw
    const auto d = sample_valid_params_uniform(s, box, Eigen::VectorXd::Ones(1), rng, 1);
    EXPECT_LE(std::abs(d.phi(0, 0)), 0.24);
  }
}

TEST(SampleValidParams, DegenerateBoxGivesZeros) {
  StackedLattice s(build_grid_lattice(3, 3), 2);
  std::mt19937_64 rng(1);
  const auto d = sample_valid_params_uniform(s, ParamBox::uniform(2, 0.0, 0.0), Eigen::VectorXd::Ones(2), rng, 1);
  EXPECT_TRUE(dependence_vector(d).isZero(0.0));
}

TEST(SampleValidParams, SaturationReportsAttempts) {
  StackedLattice s(build_grid_lattice(3, 3), 1);
  std::mt19937_64 rng(1);
  try {
    sample_valid_params_uniform(s, ParamBox::uniform(1, 0.9, 1.0), Eigen::VectorXd::Ones(1), rng, 25);
    FAIL() << "expected saturation";
  } catch (const SaturationError& e) {
    EXPECT_EQ(e.attempts, 25);
  }
}

TEST(SampleValidParams, WideBoxAcceptanceIsStrictlyBetweenZeroAndOne) {
  StackedLattice s(build_grid_lattice(10, 10), 2);
  PrecisionAssembler assembler(s);
  auto sym = std::make_shared<const SymbolicFactor>(
      symbolic_factorize(assembler.pattern(), compute_ordering(*assembler.pattern(), 2)));
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto d = DependenceParams::zeros(2);
  int accepted = 0;
  for (int t = 0; t < 1000; ++t) {
    Eigen::VectorXd v(5);
    for (Index k = 0; k < 5; ++k) v[k] = u(rng);
    set_dependence_vector(d, v);
    accepted += check_positive_definite(assembler.assemble(d), sym);
  }
  EXPECT_GT(accepted, 0);
  EXPECT_LT(accepted, 1000);
  EXPECT_EQ(accepted, kFrozenWideBoxAccepts);
}

TEST(SparsePrecision, CoordinateDump) {
  StackedLattice s(build_grid_lattice(2, 1), 1);
  auto d = DependenceParams::zeros(1);
  d.phi(0, 0) = 0.25;
  std::ostringstream os;
  assemble_precision(s, d).write_coordinates(os);
  EXPECT_EQ(os.str(), "0 0 1\n1 0 -0.25\n0 1 -0.25\n1 1 1\n");
}
