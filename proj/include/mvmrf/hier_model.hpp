#pragma once

// Three-level hierarchical model for an m-member, p-variable ensemble on a
// lattice, with Gibbs full-conditional kernels.
//
//   y_rj | .      ~ N(X1 a_j + X2 b_rj + h_rj, s2_j I)
//   b_rj | bbar_j ~ N(bbar_j, s2_b I)
//   h_r  | hbar   ~ N(hbar, Q(rho, phi, tau2)^{-1})
//
// All length-n*p vectors are location-major (flat index i*p + j).

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mvmrf/mrf_precision.hpp"
#include "mvmrf/sparse_chol.hpp"

namespace mvmrf {

struct DegeneracyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Inverse-gamma(shape, rate) prior on a variance. shape = rate = 0 is the
/// improper 1/s2 prior.
struct VariancePrior {
  double shape = 0.0;
  double rate = 0.0;
  bool proper() const { return shape > 0.0 && rate > 0.0; }
  double log_density(double s2) const { return -(shape + 1.0) * std::log(s2) - rate / s2; }
};

struct PriorSpec {
  double sigma2_alpha = 10.0;
  double sigma2_beta = 100.0;
  double sigma2_h = 10.0;
  VariancePrior sigma2;    // data variances s2_j
  VariancePrior sigma2_b;  // random-coefficient variance
  VariancePrior tau2;      // conditional variances of the MRF
  ParamBox dep_box;        // (rho, phi) support, intersected with the PD region

  static PriorSpec defaults(Index p) {
    PriorSpec s;
    s.dep_box = ParamBox::uniform(p, -kDefaultBoxHalfWidth, kDefaultBoxHalfWidth);
    return s;
  }

  void validate(Index p) const {
    if (!(sigma2_alpha > 0.0) || !(sigma2_beta > 0.0) || !(sigma2_h > 0.0))
      throw std::invalid_argument("prior variances must be positive");
    for (const auto* v : {&sigma2, &sigma2_b, &tau2})
      if (v->shape < 0.0 || v->rate < 0.0) throw std::invalid_argument("inverse-gamma prior parameters must be >= 0");
    if (dep_box.lower.size() != dependence_count(p) || dep_box.upper.size() != dependence_count(p))
      throw std::invalid_argument("dependence box has the wrong length");
    for (Index t = 0; t < dep_box.lower.size(); ++t)
      if (!(dep_box.lower[t] <= dep_box.upper[t]) || !std::isfinite(dep_box.lower[t]) || !std::isfinite(dep_box.upper[t]))
        throw std::invalid_argument("dependence box bounds must be finite and ordered");
  }
};

/// Z-scored columns (zero-variance columns are centred only).
inline Eigen::MatrixXd standardize_columns(const Eigen::MatrixXd& raw) {
  Eigen::MatrixXd out(raw.rows(), raw.cols());
  const double n = static_cast<double>(raw.rows());
  for (Index c = 0; c < raw.cols(); ++c) {
    const double mean = raw.col(c).sum() / n;
    const Eigen::VectorXd centred = raw.col(c).array() - mean;
    const double var = raw.rows() > 1 ? centred.squaredNorm() / (n - 1.0) : 0.0;
    out.col(c) = var > 0.0 ? Eigen::VectorXd(centred / std::sqrt(var)) : centred;
  }
  return out;
}

class EnsembleDataset {
public:
  /// raw_covariates: n x 3 (latitude, longitude, elevation). X1 is their
  /// z-scored version; X2 is a single intercept column.
  EnsembleDataset(StackedLattice lattice, std::vector<Eigen::VectorXd> y, Eigen::MatrixXd raw_covariates)
      : lattice_(std::move(lattice)), y_(std::move(y)), raw_(std::move(raw_covariates)) {
    if (raw_.rows() != lattice_.n()) throw std::invalid_argument("covariate rows must equal grid size");
    x1_ = standardize_columns(raw_);
    x2_ = Eigen::MatrixXd::Ones(lattice_.n(), 1);
    check();
  }

  EnsembleDataset(StackedLattice lattice, std::vector<Eigen::VectorXd> y, Eigen::MatrixXd x1, Eigen::MatrixXd x2)
      : lattice_(std::move(lattice)), y_(std::move(y)), raw_(x1), x1_(std::move(x1)), x2_(std::move(x2)) {
    check();
  }

  const StackedLattice& lattice() const { return lattice_; }
  Index n() const { return lattice_.n(); }
  Index p() const { return lattice_.p(); }
  Index m() const { return static_cast<Index>(y_.size()); }
  Index q1() const { return x1_.cols(); }
  Index q2() const { return x2_.cols(); }
  const std::vector<Eigen::VectorXd>& y() const { return y_; }
  const Eigen::VectorXd& y(Index r) const { return y_[static_cast<std::size_t>(r)]; }
  const Eigen::MatrixXd& raw_covariates() const { return raw_; }
  const Eigen::MatrixXd& x1() const { return x1_; }
  const Eigen::MatrixXd& x2() const { return x2_; }

  /// Values of variable j for member r, as a length-n vector.
  Eigen::VectorXd slice(Index r, Index j) const {
    return Eigen::Map<const Eigen::VectorXd, 0, Eigen::InnerStride<>>(y(r).data() + j, n(), Eigen::InnerStride<>(p()));
  }

private:
  void check() const {
    if (y_.empty()) throw std::invalid_argument("ensemble must have at least one member");
    if (x1_.rows() != n() || x2_.rows() != n()) throw std::invalid_argument("design rows must equal grid size");
    for (const auto& v : y_) {
      if (v.size() != lattice_.dim()) throw std::invalid_argument("response length must equal n*p");
      if (!v.allFinite()) throw std::invalid_argument("responses must be finite");
    }
    if (!x1_.allFinite() || !x2_.allFinite()) throw std::invalid_argument("covariates must be finite");
  }

  StackedLattice lattice_;
  std::vector<Eigen::VectorXd> y_;
  Eigen::MatrixXd raw_;
  Eigen::MatrixXd x1_;
  Eigen::MatrixXd x2_;
};

struct ModelState {
  Eigen::MatrixXd alpha;               // q1 x p, column j = alpha_j
  std::vector<Eigen::MatrixXd> beta;   // m of q2 x p
  Eigen::MatrixXd beta_bar;            // q2 x p
  std::vector<Eigen::VectorXd> h;      // m of n*p
  Eigen::VectorXd h_bar;               // n*p
  Eigen::VectorXd sigma2;              // p
  double sigma2_b = 1.0;
  DependenceParams dep;

  static ModelState initial(const EnsembleDataset& data) {
    const Index p = data.p();
    ModelState s;
    s.alpha = Eigen::MatrixXd::Zero(data.q1(), p);
    s.beta.assign(static_cast<std::size_t>(data.m()), Eigen::MatrixXd::Zero(data.q2(), p));
    s.beta_bar = Eigen::MatrixXd::Zero(data.q2(), p);
    s.h.assign(static_cast<std::size_t>(data.m()), Eigen::VectorXd::Zero(data.lattice().dim()));
    s.h_bar = Eigen::VectorXd::Zero(data.lattice().dim());
    s.sigma2 = Eigen::VectorXd::Ones(p);
    s.sigma2_b = 1.0;
    s.dep = DependenceParams::zeros(p);
    return s;
  }

  void validate(const EnsembleDataset& data) const {
    const Index p = data.p();
    const auto dim = data.lattice().dim();
    if (alpha.rows() != data.q1() || alpha.cols() != p || beta_bar.rows() != data.q2() || beta_bar.cols() != p ||
        static_cast<Index>(beta.size()) != data.m() || static_cast<Index>(h.size()) != data.m() ||
        h_bar.size() != dim || sigma2.size() != p || dep.p() != p)
      throw std::invalid_argument("model state dimensions do not match the dataset");
    for (const auto& b : beta)
      if (b.rows() != data.q2() || b.cols() != p) throw std::invalid_argument("beta dimensions mismatch");
    for (const auto& v : h)
      if (v.size() != dim) throw std::invalid_argument("h dimensions mismatch");
    for (Index j = 0; j < p; ++j)
      if (!(sigma2[j] > 0.0)) throw std::invalid_argument("sigma2 must be positive");
    if (!(sigma2_b > 0.0)) throw std::invalid_argument("sigma2_b must be positive");
    dep.validate();
  }
};

/// Shared per-lattice machinery: the precision assembler and one symbolic
/// factor serving Q, Q + D and m Q + c I (identical patterns).
class GmrfEngine {
public:
  explicit GmrfEngine(const StackedLattice& lattice) : assembler_(lattice) {
    symbolic_ = std::make_shared<const SymbolicFactor>(
        symbolic_factorize(assembler_.pattern(), compute_ordering(*assembler_.pattern(), lattice.p())));
  }

  const PrecisionAssembler& assembler() const { return assembler_; }
  const std::shared_ptr<const SymbolicFactor>& symbolic() const { return symbolic_; }
  SparsePrecision assemble(const DependenceParams& d) const { return assembler_.assemble(d); }
  std::optional<CholFactor> factor(const SparsePrecision& q) const { return numeric_factorize(symbolic_, q); }

private:
  PrecisionAssembler assembler_;
  std::shared_ptr<const SymbolicFactor> symbolic_;
};

namespace detail {

template <class Urbg>
Eigen::VectorXd standard_normals(Index n, Urbg& rng) {
  std::normal_distribution<double> z;
  Eigen::VectorXd v(n);
  for (Index k = 0; k < n; ++k) v[k] = z(rng);
  return v;
}

/// Draw from N(P^{-1} b, P^{-1}) for a small dense precision P.
template <class Urbg>
Eigen::VectorXd draw_canonical(const Eigen::MatrixXd& precision, const Eigen::VectorXd& b, Urbg& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) throw std::runtime_error("full-conditional precision is not positive definite");
  const Eigen::VectorXd mean = llt.solve(b);
  const Eigen::VectorXd z = standard_normals(b.size(), rng);
  return mean + llt.matrixU().solve(z);
}

template <class Urbg>
double draw_inverse_gamma(double shape, double rate, Urbg& rng) {
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  return 1.0 / g(rng);
}

inline Eigen::VectorXd column_of(const Eigen::VectorXd& flat, Index j, Index p) {
  return Eigen::Map<const Eigen::VectorXd, 0, Eigen::InnerStride<>>(flat.data() + j, flat.size() / p,
                                                                    Eigen::InnerStride<>(p));
}

}  // namespace detail

/// X1 a_j + X2 b_rj stacked location-major.
inline Eigen::VectorXd regression_mean(const EnsembleDataset& data, const ModelState& s, Index r) {
  const Index p = data.p();
  Eigen::VectorXd out(data.lattice().dim());
  for (Index j = 0; j < p; ++j) {
    const Eigen::VectorXd col = data.x1() * s.alpha.col(j) + data.x2() * s.beta[static_cast<std::size_t>(r)].col(j);
    for (Index i = 0; i < data.n(); ++i) out[i * p + j] = col[i];
  }
  return out;
}

/// Mean-change field X1 a_j + X2 bbar_j + hbar_j, location-major.
inline Eigen::VectorXd mean_field(const EnsembleDataset& data, const ModelState& s) {
  const Index p = data.p();
  Eigen::VectorXd out = s.h_bar;
  for (Index j = 0; j < p; ++j) {
    const Eigen::VectorXd col = data.x1() * s.alpha.col(j) + data.x2() * s.beta_bar.col(j);
    for (Index i = 0; i < data.n(); ++i) out[i * p + j] += col[i];
  }
  return out;
}

inline double log_likelihood(const EnsembleDataset& data, const ModelState& s) {
  s.validate(data);
  const Index p = data.p();
  const double n = static_cast<double>(data.n());
  double acc = 0.0;
  for (Index r = 0; r < data.m(); ++r) {
    const Eigen::VectorXd e = data.y(r) - regression_mean(data, s, r) - s.h[static_cast<std::size_t>(r)];
    for (Index j = 0; j < p; ++j) {
      const double ss = detail::column_of(e, j, p).squaredNorm();
      acc += -0.5 * n * std::log(2.0 * std::numbers::pi * s.sigma2[j]) - 0.5 * ss / s.sigma2[j];
    }
  }
  return acc;
}

/// Canonical form of a Gaussian: density proportional to exp(-x'Px/2 + b'x).
struct DenseCanonical {
  Eigen::MatrixXd precision;
  Eigen::VectorXd b;
  Eigen::VectorXd mean() const { return precision.llt().solve(b); }
};

/// alpha_j | rest: precision m X1'X1 / s2_j + I / s2_alpha,
/// b = X1' sum_r (y_rj - X2 b_rj - h_rj) / s2_j.
inline DenseCanonical alpha_conditional(const EnsembleDataset& data, const ModelState& s, const PriorSpec& prior,
                                        Index j) {
  const Index p = data.p();
  Eigen::VectorXd resid_sum = Eigen::VectorXd::Zero(data.n());
  for (Index r = 0; r < data.m(); ++r)
    resid_sum += data.slice(r, j) - data.x2() * s.beta[static_cast<std::size_t>(r)].col(j) -
                 detail::column_of(s.h[static_cast<std::size_t>(r)], j, p);
  Eigen::MatrixXd prec = data.x1().transpose() * data.x1() * (static_cast<double>(data.m()) / s.sigma2[j]);
  prec.diagonal().array() += 1.0 / prior.sigma2_alpha;
  return {std::move(prec), data.x1().transpose() * resid_sum / s.sigma2[j]};
}

template <class Urbg>
void update_alpha(const EnsembleDataset& data, ModelState& s, const PriorSpec& prior, Urbg& rng) {
  if (data.q1() == 0) return;
  for (Index j = 0; j < data.p(); ++j) {
    const auto c = alpha_conditional(data, s, prior, j);
    s.alpha.col(j) = detail::draw_canonical(c.precision, c.b, rng);
  }
}

/// b_rj | rest: precision X2'X2 / s2_j + I / s2_b,
/// b = X2'(y_rj - X1 a_j - h_rj) / s2_j + bbar_j / s2_b.
inline DenseCanonical beta_conditional(const EnsembleDataset& data, const ModelState& s, Index r, Index j) {
  const Eigen::VectorXd resid =
      data.slice(r, j) - data.x1() * s.alpha.col(j) - detail::column_of(s.h[static_cast<std::size_t>(r)], j, data.p());
  Eigen::MatrixXd prec = data.x2().transpose() * data.x2() / s.sigma2[j];
  prec.diagonal().array() += 1.0 / s.sigma2_b;
  return {std::move(prec), data.x2().transpose() * resid / s.sigma2[j] + s.beta_bar.col(j) / s.sigma2_b};
}

template <class Urbg>
void update_beta_r(const EnsembleDataset& data, ModelState& s, Urbg& rng) {
  for (Index r = 0; r < data.m(); ++r)
    for (Index j = 0; j < data.p(); ++j) {
      const auto c = beta_conditional(data, s, r, j);
      s.beta[static_cast<std::size_t>(r)].col(j) = detail::draw_canonical(c.precision, c.b, rng);
    }
}

/// bbar_j | rest: precision m / s2_b + 1 / s2_beta per coefficient.
template <class Urbg>
void update_beta_bar(ModelState& s, const PriorSpec& prior, Urbg& rng) {
  const auto m = static_cast<double>(s.beta.size());
  const double prec = m / s.sigma2_b + 1.0 / prior.sigma2_beta;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(s.beta_bar.rows(), s.beta_bar.cols());
  for (const auto& b : s.beta) sum += b;
  std::normal_distribution<double> z;
  for (Index j = 0; j < s.beta_bar.cols(); ++j)
    for (Index k = 0; k < s.beta_bar.rows(); ++k)
      s.beta_bar(k, j) = sum(k, j) / s.sigma2_b / prec + z(rng) / std::sqrt(prec);
}

/// Conditional precision Q + diag(1/s2) shared by every h_r.
inline SparsePrecision h_conditional_precision(const SparsePrecision& q, const Eigen::VectorXd& sigma2) {
  const Index p = sigma2.size();
  Eigen::VectorXd d(q.dim());
  for (Index a = 0; a < q.dim(); ++a) d[a] = 1.0 / sigma2[a % p];
  return q.scaled_plus_diagonal(1.0, d);
}

/// b vector of h_r | rest: Q hbar + D (y_r - X1 a - X2 b_r), D = diag(1/s2_j).
inline Eigen::VectorXd h_r_canonical_b(const EnsembleDataset& data, const ModelState& s, const SparsePrecision& q,
                                       Index r) {
  const Index p = data.p();
  Eigen::VectorXd b = data.y(r) - regression_mean(data, s, r);
  for (Index a = 0; a < b.size(); ++a) b[a] /= s.sigma2[a % p];
  return b + q.multiply(s.h_bar);
}

/// h_r | rest ~ N((Q + D)^{-1} b_r, (Q + D)^{-1}); q is the precision for the
/// current dependence parameters. One factorization serves every member.
template <class Urbg>
void update_h_r(const EnsembleDataset& data, ModelState& s, const GmrfEngine& engine, const SparsePrecision& q,
                Urbg& rng) {
  const auto f = engine.factor(h_conditional_precision(q, s.sigma2));
  if (!f)
    throw DegeneracyError("conditional precision of h_r is not positive definite (sigma2 collapsed toward zero; "
                          "a proper inverse-gamma prior on sigma2 avoids this)");
  for (Index r = 0; r < data.m(); ++r)
    s.h[static_cast<std::size_t>(r)] = sample_gmrf(*f, solve(*f, h_r_canonical_b(data, s, q, r)), rng);
}

/// hbar | rest: precision mQ + I/s2_h, b = Q sum_r h_r.
inline std::pair<SparsePrecision, Eigen::VectorXd> h_bar_canonical(const ModelState& s, const PriorSpec& prior,
                                                                   const SparsePrecision& q) {
  const auto m = static_cast<double>(s.h.size());
  Eigen::VectorXd h_sum = Eigen::VectorXd::Zero(q.dim());
  for (const auto& h : s.h) h_sum += h;
  return {q.scaled_plus_diagonal(m, Eigen::VectorXd::Constant(q.dim(), 1.0 / prior.sigma2_h)), q.multiply(h_sum)};
}

template <class Urbg>
void update_h_bar(ModelState& s, const PriorSpec& prior, const GmrfEngine& engine, const SparsePrecision& q, Urbg& rng) {
  const auto [prec, b] = h_bar_canonical(s, prior, q);
  const auto f = engine.factor(prec);
  if (!f) throw std::logic_error("conditional precision of h_bar is not positive definite");
  s.h_bar = sample_gmrf(*f, solve(*f, b), rng);
}

/// Translation move along the directions the likelihood cannot see: for
/// each variable j, h_bar and every h_r gain X1 d1 + X2 d2 while alpha_j,
/// beta_bar_j and every beta_rj lose (d1, d2). Only the Gaussian priors on
/// h_bar, alpha and beta_bar change, so d is an exact Gaussian draw.
template <class Urbg>
void update_level_shift(const EnsembleDataset& data, ModelState& s, const PriorSpec& prior, Urbg& rng) {
  const Index p = data.p(), q1 = data.q1(), q2 = data.q2();
  const Index k = q1 + q2;
  if (k == 0) return;
  Eigen::MatrixXd zmat(data.n(), k);
  zmat << data.x1(), data.x2();
  Eigen::MatrixXd prec = zmat.transpose() * zmat / prior.sigma2_h;
  for (Index c = 0; c < q1; ++c) prec(c, c) += 1.0 / prior.sigma2_alpha;
  for (Index c = q1; c < k; ++c) prec(c, c) += 1.0 / prior.sigma2_beta;
  for (Index j = 0; j < p; ++j) {
    const Eigen::VectorXd hj = detail::column_of(s.h_bar, j, p);
    Eigen::VectorXd b = -zmat.transpose() * hj / prior.sigma2_h;
    b.head(q1) += s.alpha.col(j) / prior.sigma2_alpha;
    b.tail(q2) += s.beta_bar.col(j) / prior.sigma2_beta;
    const Eigen::VectorXd d = detail::draw_canonical(prec, b, rng);
    const Eigen::VectorXd shift = zmat * d;
    for (Index i = 0; i < data.n(); ++i) {
      s.h_bar[i * p + j] += shift[i];
      for (auto& h : s.h) h[i * p + j] += shift[i];
    }
    s.alpha.col(j) -= d.head(q1);
    s.beta_bar.col(j) -= d.tail(q2);
    for (auto& br : s.beta) br.col(j) -= d.tail(q2);
  }
}

/// log p(sigma2, tau2 | rest) with every h_r integrated out, up to a constant:
///   sum_r log N(e_r; hbar, Q^-1 + D) + log priors, e_r = y_r - X1 a - X2 b_r,
/// evaluated through P = Q + D^-1 so only sparse factors are needed.
inline double log_marginal_variances(const EnsembleDataset& data, const ModelState& s, const DependenceParams& dep,
                                     const Eigen::VectorXd& sigma2, const GmrfEngine& engine, const PriorSpec& prior) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (!(sigma2.array() > 0.0).all() || !sigma2.allFinite()) return kNegInf;
  if (!(dep.tau2.array() > 0.0).all() || !dep.tau2.allFinite()) return kNegInf;
  const auto q = engine.assemble(dep);
  const auto fq = engine.factor(q);
  if (!fq) return kNegInf;
  const auto f = engine.factor(h_conditional_precision(q, sigma2));
  if (!f) return kNegInf;
  const Index p = data.p();
  const double log_d = static_cast<double>(data.n()) * sigma2.array().log().sum();
  double acc = 0.5 * static_cast<double>(data.m()) * (log_det(*fq) - log_det(*f) - log_d);
  for (Index r = 0; r < data.m(); ++r) {
    const Eigen::VectorXd e = data.y(r) - regression_mean(data, s, r) - s.h_bar;
    Eigen::VectorXd g(e.size());
    for (Index a = 0; a < e.size(); ++a) g[a] = e[a] / sigma2[a % p];
    acc -= 0.5 * (e.dot(g) - g.dot(solve(*f, g)));
  }
  for (Index k = 0; k < p; ++k) acc += prior.sigma2.log_density(sigma2[k]) + prior.tau2.log_density(dep.tau2[k]);
  return acc;
}

/// s2_j ~ IG(a + m n / 2, b + SS_j / 2); s2_b ~ IG(a + m p q2 / 2, b + SS_b / 2).
template <class Urbg>
void update_sigma2(const EnsembleDataset& data, ModelState& s, const PriorSpec& prior, Urbg& rng) {
  const Index p = data.p();
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(p);
  for (Index r = 0; r < data.m(); ++r) {
    const Eigen::VectorXd e = data.y(r) - regression_mean(data, s, r) - s.h[static_cast<std::size_t>(r)];
    for (Index a = 0; a < e.size(); ++a) ss[a % p] += e[a] * e[a];
  }
  for (Index j = 0; j < p; ++j) {
    const double rate = prior.sigma2.rate + 0.5 * ss[j];
    if (!(rate > 0.0)) throw DegeneracyError("zero residual sum for variable " + std::to_string(j) + " under the 1/s2 prior");
    s.sigma2[j] = detail::draw_inverse_gamma(prior.sigma2.shape + 0.5 * static_cast<double>(data.m() * data.n()), rate, rng);
  }
  if (data.q2() == 0) return;
  double ssb = 0.0;
  for (const auto& b : s.beta) ssb += (b - s.beta_bar).squaredNorm();
  const double rate_b = prior.sigma2_b.rate + 0.5 * ssb;
  if (!(rate_b > 0.0)) throw DegeneracyError("zero random-coefficient spread under the 1/s2 prior");
  const double shape_b = prior.sigma2_b.shape + 0.5 * static_cast<double>(data.m() * p * data.q2());
  s.sigma2_b = detail::draw_inverse_gamma(shape_b, rate_b, rng);
}

/// Log density (up to a constant) of the dependence parameters given the
/// spatial-effect deviations d_r = h_r - hbar:
///   sum_r [ 1/2 log det Q - 1/2 d_r' Q d_r ] + log prior.
/// Outside the box or the PD region the result is -infinity.
inline double log_posterior_dep(const DependenceParams& dep, const std::vector<Eigen::VectorXd>& deviations,
                                const GmrfEngine& engine, const PriorSpec& prior) {
  constexpr double kReject = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < dep.p(); ++j)
    if (!(dep.tau2[j] > 0.0) || !std::isfinite(dep.tau2[j])) return kReject;
  if (!prior.dep_box.contains(dependence_vector(dep))) return kReject;
  const auto q = engine.assemble(dep);
  const auto f = engine.factor(q);
  if (!f) return kReject;
  double acc = 0.0;
  const double half_logdet = 0.5 * log_det(*f);
  for (const auto& d : deviations) acc += half_logdet - 0.5 * q.quad_form(d);
  for (Index j = 0; j < dep.p(); ++j) acc += prior.tau2.log_density(dep.tau2[j]);
  return acc;
}

inline double log_posterior_dep(const ModelState& s, const GmrfEngine& engine, const PriorSpec& prior) {
  std::vector<Eigen::VectorXd> dev;
  dev.reserve(s.h.size());
  for (const auto& h : s.h) dev.push_back(h - s.h_bar);
  return log_posterior_dep(s.dep, dev, engine, prior);
}

/// Sum over members of d_r d_r' restricted to the precision pattern, with
/// d_r = h_r - hbar. The quadratic part of the dependence-parameter target
/// is then a dot product with Q's stored values.
struct DeviationMoments {
  std::vector<double> w;
  Index members = 0;
};

inline DeviationMoments deviation_moments(const SparsePattern& pattern, const std::vector<Eigen::VectorXd>& h,
                                          const Eigen::VectorXd& h_bar) {
  DeviationMoments out;
  out.members = static_cast<Index>(h.size());
  out.w.assign(static_cast<std::size_t>(pattern.nnz()), 0.0);
  for (const auto& hr : h) {
    const Eigen::VectorXd d = hr - h_bar;
    for (Index c = 0; c < pattern.dim; ++c)
      for (Index q = pattern.col_ptr[c]; q < pattern.col_ptr[c + 1]; ++q)
        out.w[static_cast<std::size_t>(q)] += d[pattern.row_idx[q]] * d[c];
  }
  return out;
}

inline double log_posterior_dep(const DependenceParams& dep, const DeviationMoments& moments,
                                const GmrfEngine& engine, const PriorSpec& prior) {
  constexpr double kReject = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < dep.p(); ++j)
    if (!(dep.tau2[j] > 0.0) || !std::isfinite(dep.tau2[j])) return kReject;
  if (!prior.dep_box.contains(dependence_vector(dep))) return kReject;
  const auto q = engine.assemble(dep);
  const auto f = engine.factor(q);
  if (!f) return kReject;
  double quad = 0.0;
  const auto& v = q.values();
  for (std::size_t k = 0; k < v.size(); ++k) quad += v[k] * moments.w[k];
  double acc = 0.5 * static_cast<double>(moments.members) * log_det(*f) - 0.5 * quad;
  for (Index j = 0; j < dep.p(); ++j) acc += prior.tau2.log_density(dep.tau2[j]);
  return acc;
}

/// Draw every model quantity from the prior (requires proper variance
/// priors). Dependence parameters come from the rejection sampler.
template <class Urbg>
ModelState sample_from_prior(const EnsembleDataset& data, const PriorSpec& prior, const GmrfEngine& engine,
                             Urbg& rng, Index max_tries = 100000) {
  if (!prior.sigma2.proper() || !prior.sigma2_b.proper() || !prior.tau2.proper())
    throw std::invalid_argument("prior sampling needs proper variance priors");
  const Index p = data.p();
  ModelState s = ModelState::initial(data);
  std::normal_distribution<double> z;
  for (Index j = 0; j < p; ++j)
    for (Index k = 0; k < data.q1(); ++k) s.alpha(k, j) = std::sqrt(prior.sigma2_alpha) * z(rng);
  for (Index j = 0; j < p; ++j)
    for (Index k = 0; k < data.q2(); ++k) s.beta_bar(k, j) = std::sqrt(prior.sigma2_beta) * z(rng);
  s.sigma2_b = detail::draw_inverse_gamma(prior.sigma2_b.shape, prior.sigma2_b.rate, rng);
  for (auto& b : s.beta)
    for (Index j = 0; j < p; ++j)
      for (Index k = 0; k < data.q2(); ++k) b(k, j) = s.beta_bar(k, j) + std::sqrt(s.sigma2_b) * z(rng);
  for (Index a = 0; a < s.h_bar.size(); ++a) s.h_bar[a] = std::sqrt(prior.sigma2_h) * z(rng);
  Eigen::VectorXd tau2(p);
  for (Index j = 0; j < p; ++j) tau2[j] = detail::draw_inverse_gamma(prior.tau2.shape, prior.tau2.rate, rng);
  s.dep = sample_valid_params_uniform(engine.assembler(), engine.symbolic(), prior.dep_box, tau2, rng, max_tries);
  const auto f = engine.factor(engine.assemble(s.dep));
  for (auto& h : s.h) h = sample_gmrf(*f, s.h_bar, rng);
  for (Index j = 0; j < p; ++j) s.sigma2[j] = detail::draw_inverse_gamma(prior.sigma2.shape, prior.sigma2.rate, rng);
  return s;
}

/// y_r = X1 a + X2 b_r + h_r + noise, one vector per member.
template <class Urbg>
std::vector<Eigen::VectorXd> draw_responses(const EnsembleDataset& design, const ModelState& s, Urbg& rng) {
  const Index p = design.p();
  std::normal_distribution<double> z;
  std::vector<Eigen::VectorXd> y;
  for (Index r = 0; r < design.m(); ++r) {
    Eigen::VectorXd v = regression_mean(design, s, r) + s.h[static_cast<std::size_t>(r)];
    for (Index a = 0; a < v.size(); ++a) v[a] += std::sqrt(s.sigma2[a % p]) * z(rng);
    y.push_back(std::move(v));
  }
  return y;
}

}  // namespace mvmrf
