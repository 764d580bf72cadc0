#pragma once

// Joint precision of the stacked multivariate MRF.
//
// For location-major ordering the precision has p-by-p blocks
//   (i,i): D^{-1/2} A D^{-1/2},  A = 1 on the diagonal, -rho_{jl} off it
//   (i,k), i>k neighbours: -D^{-1/2} Phi D^{-1/2}
//   (k,i): transpose of (i,k)
// with D = diag(tau2). Positive phi means positive conditional dependence.

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mvmrf/lattice_graph.hpp"
#include "mvmrf/sparse_chol.hpp"
#include "mvmrf/sparse_matrix.hpp"

namespace mvmrf {

struct DependenceParams {
  Eigen::MatrixXd rho;   // symmetric, diagonal ignored
  Eigen::MatrixXd phi;   // general
  Eigen::VectorXd tau2;  // conditional variances

  static DependenceParams zeros(Index p) {
    return {Eigen::MatrixXd::Zero(p, p), Eigen::MatrixXd::Zero(p, p), Eigen::VectorXd::Ones(p)};
  }

  Index p() const { return tau2.size(); }

  void set_rho(Index j, Index l, double v) {
    rho(j, l) = v;
    rho(l, j) = v;
  }

  void validate() const {
    const Index p = tau2.size();
    if (p < 1 || rho.rows() != p || rho.cols() != p || phi.rows() != p || phi.cols() != p)
      throw std::invalid_argument("dependence parameter dimensions are inconsistent");
    for (Index j = 0; j < p; ++j) {
      if (!(tau2[j] > 0.0) || !std::isfinite(tau2[j])) throw std::invalid_argument("tau2 must be positive");
      for (Index l = j + 1; l < p; ++l)
        if (rho(j, l) != rho(l, j)) throw std::invalid_argument("rho must be symmetric");
    }
  }

  friend bool operator==(const DependenceParams& a, const DependenceParams& b) {
    return a.rho == b.rho && a.phi == b.phi && a.tau2 == b.tau2;
  }
};

// Flat layout of the (rho, phi) part: rho_{jl} for j<l in row-major order,
// then phi_{jl} for all (j,l) in row-major order.
inline Index dependence_count(Index p) { return p * (p - 1) / 2 + p * p; }

inline std::vector<std::string> dependence_names(Index p) {
  std::vector<std::string> names;
  for (Index j = 0; j < p; ++j)
    for (Index l = j + 1; l < p; ++l) names.push_back("rho_" + std::to_string(j + 1) + std::to_string(l + 1));
  for (Index j = 0; j < p; ++j)
    for (Index l = 0; l < p; ++l) names.push_back("phi_" + std::to_string(j + 1) + std::to_string(l + 1));
  return names;
}

inline Eigen::VectorXd dependence_vector(const DependenceParams& d) {
  const Index p = d.p();
  Eigen::VectorXd v(dependence_count(p));
  Index t = 0;
  for (Index j = 0; j < p; ++j)
    for (Index l = j + 1; l < p; ++l) v[t++] = d.rho(j, l);
  for (Index j = 0; j < p; ++j)
    for (Index l = 0; l < p; ++l) v[t++] = d.phi(j, l);
  return v;
}

inline void set_dependence_vector(DependenceParams& d, const Eigen::VectorXd& v) {
  const Index p = d.p();
  if (v.size() != dependence_count(p)) throw std::invalid_argument("dependence vector length mismatch");
  Index t = 0;
  for (Index j = 0; j < p; ++j)
    for (Index l = j + 1; l < p; ++l) d.set_rho(j, l, v[t++]);
  for (Index j = 0; j < p; ++j)
    for (Index l = 0; l < p; ++l) d.phi(j, l) = v[t++];
}

/// Per-parameter bounds on the flat (rho, phi) vector.
struct ParamBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static ParamBox uniform(Index p, double lo, double hi) {
    const Index c = dependence_count(p);
    return {Eigen::VectorXd::Constant(c, lo), Eigen::VectorXd::Constant(c, hi)};
  }

  bool contains(const Eigen::VectorXd& v) const {
    for (Index t = 0; t < v.size(); ++t)
      if (v[t] < lower[t] || v[t] > upper[t]) return false;
    return true;
  }
};

inline constexpr double kDefaultBoxHalfWidth = 0.3;

/// Sparsity structure of the stacked precision plus, for every stored
/// entry, which parameter it is built from. Assembly is a single pass.
class PrecisionAssembler {
public:
  explicit PrecisionAssembler(StackedLattice lattice) : lattice_(std::move(lattice)) {
    const Index n = lattice_.n();
    const Index p = lattice_.p();
    std::vector<std::vector<Index>> cols(static_cast<std::size_t>(lattice_.dim()));
    for (Index i = 0; i < n; ++i) {
      for (Index l = 0; l < p; ++l) {
        auto& col = cols[static_cast<std::size_t>(i * p + l)];
        for (Index j = 0; j < p; ++j) col.push_back(i * p + j);
        for (Index k : lattice_.grid().neighbors(i))
          for (Index j = 0; j < p; ++j) col.push_back(k * p + j);
      }
    }
    pattern_ = std::make_shared<const SparsePattern>(SparsePattern::from_columns(std::move(cols)));
    slots_.reserve(static_cast<std::size_t>(pattern_->nnz()));
    for (Index c = 0; c < pattern_->dim; ++c) {
      const auto [k, l] = lattice_.unflatten(c);
      for (Index q = pattern_->col_ptr[c]; q < pattern_->col_ptr[c + 1]; ++q) {
        const auto [i, j] = lattice_.unflatten(pattern_->row_idx[q]);
        Slot s{};
        s.j = j;
        s.l = l;
        if (i == k) {
          s.kind = (j == l) ? Slot::Diagonal : Slot::WithinLocation;
        } else {
          // row location i, column location k; block (i,k) with i>k holds Phi
          s.kind = Slot::Cross;
          s.phi_row = (i > k) ? j : l;
          s.phi_col = (i > k) ? l : j;
        }
        slots_.push_back(s);
      }
    }
  }

  const StackedLattice& lattice() const { return lattice_; }
  const std::shared_ptr<const SparsePattern>& pattern() const { return pattern_; }

  SparsePrecision assemble(const DependenceParams& d) const {
    d.validate();
    if (d.p() != lattice_.p()) throw std::invalid_argument("dependence parameters do not match lattice p");
    const Eigen::VectorXd inv_tau = d.tau2.cwiseSqrt().cwiseInverse();
    std::vector<double> v(slots_.size());
    for (std::size_t q = 0; q < slots_.size(); ++q) {
      const Slot& s = slots_[q];
      const double scale = inv_tau[s.j] * inv_tau[s.l];
      switch (s.kind) {
        case Slot::Diagonal: v[q] = scale; break;
        case Slot::WithinLocation: v[q] = -d.rho(s.j, s.l) * scale; break;
        case Slot::Cross: v[q] = -d.phi(s.phi_row, s.phi_col) * scale; break;
      }
    }
    return SparsePrecision(pattern_, std::move(v));
  }

  /// Expected nonzero count n*p + n*p*(p-1) + 2*|edges|*p^2.
  Index expected_nnz() const {
    const Index n = lattice_.n();
    const Index p = lattice_.p();
    return n * p + n * p * (p - 1) + 2 * static_cast<Index>(edge_list(lattice_.grid()).size()) * p * p;
  }

private:
  struct Slot {
    enum Kind : unsigned char { Diagonal, WithinLocation, Cross } kind;
    Index j, l, phi_row, phi_col;
  };

  StackedLattice lattice_;
  std::shared_ptr<const SparsePattern> pattern_;
  std::vector<Slot> slots_;
};

inline SparsePrecision assemble_precision(const StackedLattice& lattice, const DependenceParams& d) {
  if (d.p() != lattice.p()) throw std::invalid_argument("dependence parameters do not match lattice p");
  return PrecisionAssembler(lattice).assemble(d);
}

enum class CoefficientKind { WithinLayer, WithinLocation, Cross };

/// Which side of a neighbour pair the conditioned variable sits on. The
/// Phi block belongs to the higher-indexed location; from the lower one the
/// transpose applies.
enum class EdgeSide { FromHigher, FromLower };

/// Coefficient b of the conditional mean: the weight on (y_{k,l} - mu_{k,l})
/// in E[y_{i,j} | rest].
inline double conditional_coefficient(const DependenceParams& d, CoefficientKind kind, Index j, Index l,
                                      EdgeSide side = EdgeSide::FromHigher) {
  const Index p = d.p();
  if (j < 0 || j >= p || l < 0 || l >= p) throw std::invalid_argument("variable index out of range");
  const double ratio = std::sqrt(d.tau2[j]) / std::sqrt(d.tau2[l]);
  switch (kind) {
    case CoefficientKind::WithinLayer:
      if (j != l) throw std::invalid_argument("within-layer coefficient needs j == l");
      return d.phi(j, j);
    case CoefficientKind::WithinLocation:
      if (j == l) throw std::invalid_argument("within-location coefficient needs j != l");
      return d.rho(j, l) * ratio;
    case CoefficientKind::Cross:
      return (side == EdgeSide::FromHigher ? d.phi(j, l) : d.phi(l, j)) * ratio;
  }
  return 0.0;
}

struct SaturationError : std::runtime_error {
  SaturationError(const std::string& what, Index attempts_) : std::runtime_error(what), attempts(attempts_) {}
  Index attempts;
};

/// Rejection sampler for (rho, phi) uniform on box ∩ {Q positive definite};
/// tau2 held at the supplied values.
template <class Urbg>
DependenceParams sample_valid_params_uniform(const PrecisionAssembler& assembler,
                                             const std::shared_ptr<const SymbolicFactor>& symbolic,
                                             const ParamBox& box, const Eigen::VectorXd& tau2, Urbg& rng,
                                             Index max_tries) {
  const Index p = assembler.lattice().p();
  if (max_tries < 1) throw std::invalid_argument("max_tries must be at least 1");
  if (box.lower.size() != dependence_count(p) || box.upper.size() != dependence_count(p))
    throw std::invalid_argument("parameter box has the wrong length");
  DependenceParams d = DependenceParams::zeros(p);
  d.tau2 = tau2;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd v(dependence_count(p));
  for (Index attempt = 0; attempt < max_tries; ++attempt) {
    for (Index t = 0; t < v.size(); ++t) v[t] = box.lower[t] + (box.upper[t] - box.lower[t]) * unif(rng);
    set_dependence_vector(d, v);
    if (check_positive_definite(assembler.assemble(d), symbolic)) return d;
  }
  throw SaturationError("no positive-definite parameter draw in " + std::to_string(max_tries) + " attempts",
                        max_tries);
}

template <class Urbg>
DependenceParams sample_valid_params_uniform(const StackedLattice& lattice, const ParamBox& box,
                                             const Eigen::VectorXd& tau2, Urbg& rng, Index max_tries) {
  PrecisionAssembler assembler(lattice);
  auto sym = std::make_shared<const SymbolicFactor>(
      symbolic_factorize(assembler.pattern(), compute_ordering(*assembler.pattern(), lattice.p())));
  return sample_valid_params_uniform(assembler, sym, box, tau2, rng, max_tries);
}

}  // namespace mvmrf
