#pragma once

// Decision products computed from posterior draws of the mean-change field.
// A field sample matrix has one row per draw and n*p location-major columns
// (column i*p + j is variable j at grid box i).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mvmrf/lattice_graph.hpp"

namespace mvmrf {

enum class Direction { Above, Below };

inline Direction parse_direction(const std::string& s) {
  if (s == "above") return Direction::Above;
  if (s == "below") return Direction::Below;
  throw std::invalid_argument("direction must be 'above' or 'below'");
}

/// Threshold for exceedance events: a fixed value, or the median of the
/// variable over every draw and every box.
struct Threshold {
  enum class Kind { GlobalMedian, Value } kind = Kind::GlobalMedian;
  double value = 0.0;

  static Threshold median() { return {}; }
  static Threshold at(double v) { return {Kind::Value, v}; }
};

struct Condition {
  Index variable = 0;
  Direction direction = Direction::Above;
  Threshold threshold;
};

/// Type-7 (linear interpolation) sample quantile.
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace detail {

inline Index box_count(const Eigen::MatrixXd& field, Index p) {
  if (p < 1 || field.cols() % p != 0) throw std::invalid_argument("field columns are not a multiple of p");
  if (field.rows() == 0) throw std::invalid_argument("empty posterior sample");
  return field.cols() / p;
}

inline void check_variable(Index variable, Index p) {
  if (variable < 0 || variable >= p) throw std::invalid_argument("variable index out of range");
}

inline std::vector<double> variable_values(const Eigen::MatrixXd& field, Index p, Index variable) {
  const Index n = field.cols() / p;
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(field.rows() * n));
  for (Index i = 0; i < n; ++i)
    for (Index s = 0; s < field.rows(); ++s) all.push_back(field(s, i * p + variable));
  return all;
}

inline double resolve(const Threshold& t, const Eigen::MatrixXd& field, Index p, Index variable) {
  if (t.kind == Threshold::Kind::Value) return t.value;
  return quantile(variable_values(field, p, variable), 0.5);
}

inline bool satisfies(double x, Direction d, double threshold) {
  return d == Direction::Above ? x > threshold : x < threshold;
}

}  // namespace detail

/// Per-box fraction of draws satisfying every condition (strict inequalities).
inline Eigen::VectorXd joint_probability(const Eigen::MatrixXd& field, Index p, const std::vector<Condition>& conds) {
  const Index n = detail::box_count(field, p);
  if (conds.empty()) throw std::invalid_argument("joint probability needs at least one condition");
  std::vector<double> cut;
  for (const auto& c : conds) {
    detail::check_variable(c.variable, p);
    cut.push_back(detail::resolve(c.threshold, field, p, c.variable));
  }
  Eigen::VectorXd out(n);
  for (Index i = 0; i < n; ++i) {
    Index hits = 0;
    for (Index s = 0; s < field.rows(); ++s) {
      bool all = true;
      for (std::size_t k = 0; k < conds.size() && all; ++k)
        all = detail::satisfies(field(s, i * p + conds[k].variable), conds[k].direction, cut[k]);
      hits += all ? 1 : 0;
    }
    out[i] = static_cast<double>(hits) / static_cast<double>(field.rows());
  }
  return out;
}

inline Eigen::VectorXd pointwise_probability(const Eigen::MatrixXd& field, Index p, Index variable,
                                             Direction direction, Threshold threshold) {
  return joint_probability(field, p, {{variable, direction, threshold}});
}

enum class QuartileScope { PerBox, Global };
enum class QuartileEvent { Upper, Lower };

struct ConditionalField {
  Eigen::VectorXd probability;  // NaN where the conditioning bin is empty
  std::vector<Index> count;     // draws in the conditioning bin
};

namespace detail {

struct Quartiles {
  double q1, q2, q3;
  int bin(double x) const { return x <= q1 ? 1 : x <= q2 ? 2 : x <= q3 ? 3 : 4; }
};

inline Quartiles quartiles_of(std::vector<double> v) {
  return {quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75)};
}

inline std::vector<double> box_values(const Eigen::MatrixXd& field, Index p, Index box, Index variable) {
  std::vector<double> v(static_cast<std::size_t>(field.rows()));
  for (Index s = 0; s < field.rows(); ++s) v[static_cast<std::size_t>(s)] = field(s, box * p + variable);
  return v;
}

}  // namespace detail

/// P(target in its upper/lower quartile | condition variable in quartile
/// cond_quartile). Quartile bins are (-inf, q1], (q1, q2], (q2, q3], (q3, inf).
/// Upper event: x > q3; lower event: x <= q1.
inline ConditionalField conditional_quartile_probability(const Eigen::MatrixXd& field, Index p, Index cond_var,
                                                         int cond_quartile, Index target_var, QuartileEvent event,
                                                         QuartileScope scope = QuartileScope::PerBox) {
  const Index n = detail::box_count(field, p);
  detail::check_variable(cond_var, p);
  detail::check_variable(target_var, p);
  if (cond_quartile < 1 || cond_quartile > 4) throw std::invalid_argument("quartile must be 1..4");
  std::optional<detail::Quartiles> global_c, global_t;
  if (scope == QuartileScope::Global) {
    global_c = detail::quartiles_of(detail::variable_values(field, p, cond_var));
    global_t = detail::quartiles_of(detail::variable_values(field, p, target_var));
  }
  ConditionalField out{Eigen::VectorXd(n), std::vector<Index>(static_cast<std::size_t>(n), 0)};
  for (Index i = 0; i < n; ++i) {
    const auto cv = detail::box_values(field, p, i, cond_var);
    const auto tv = detail::box_values(field, p, i, target_var);
    const auto qc = global_c ? *global_c : detail::quartiles_of(cv);
    const auto qt = global_t ? *global_t : detail::quartiles_of(tv);
    Index in_bin = 0, hits = 0;
    for (std::size_t s = 0; s < cv.size(); ++s) {
      if (qc.bin(cv[s]) != cond_quartile) continue;
      ++in_bin;
      const bool ev = event == QuartileEvent::Upper ? tv[s] > qt.q3 : tv[s] <= qt.q1;
      hits += ev ? 1 : 0;
    }
    out.count[static_cast<std::size_t>(i)] = in_bin;
    out.probability[i] = in_bin == 0 ? std::numeric_limits<double>::quiet_NaN()
                                     : static_cast<double>(hits) / static_cast<double>(in_bin);
  }
  return out;
}

// ---- per-box Gaussian summaries -------------------------------------------

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

namespace detail {

inline Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (cov.rows() != cov.cols() || llt.info() != Eigen::Success ||
      !(llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0))
    throw std::invalid_argument("covariance is not positive definite");
  return llt;
}

// KL(a || b) for Gaussians given the factor of b's covariance
inline double kl_directed(const Gaussian& a, const Gaussian& b, const Eigen::LLT<Eigen::MatrixXd>& la,
                          const Eigen::LLT<Eigen::MatrixXd>& lb) {
  const auto k = static_cast<double>(a.mean.size());
  const double trace = lb.solve(a.cov).trace();
  const Eigen::VectorXd diff = b.mean - a.mean;
  const double maha = diff.dot(lb.solve(diff));
  const double logdet_a = 2.0 * la.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double logdet_b = 2.0 * lb.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return 0.5 * (trace + maha - k + logdet_b - logdet_a);
}

}  // namespace detail

/// KL(g1 || g2) + KL(g2 || g1).
inline double symmetrized_kl(const Gaussian& g1, const Gaussian& g2) {
  if (g1.mean.size() != g2.mean.size() || g1.cov.rows() != g1.mean.size() || g2.cov.rows() != g2.mean.size())
    throw std::invalid_argument("Gaussian dimensions differ");
  const auto l1 = detail::checked_llt(g1.cov);
  const auto l2 = detail::checked_llt(g2.cov);
  return std::max(0.0, detail::kl_directed(g1, g2, l1, l2) + detail::kl_directed(g2, g1, l2, l1));
}

struct GridBoxPosterior {
  Index location = 0;
  Gaussian dist;
  bool degenerate = false;  // covariance not positive definite
};

/// Sample mean and covariance of the p-variate field at each box.
inline std::vector<GridBoxPosterior> fit_gridbox_posteriors(const Eigen::MatrixXd& field, Index p) {
  const Index n = detail::box_count(field, p);
  if (field.rows() < 2) throw std::invalid_argument("need at least two posterior draws");
  std::vector<GridBoxPosterior> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Eigen::MatrixXd x = field.middleCols(i * p, p);
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Eigen::MatrixXd centred = x.rowwise() - mean;
    Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(field.rows() - 1);
    cov = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const bool degenerate = llt.info() != Eigen::Success ||
                            !(llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 1e-12 * std::max(1.0, cov.diagonal().maxCoeff()));
    out.push_back({i, {mean.transpose(), cov}, degenerate});
  }
  return out;
}

// ---- agglomerative clustering ----------------------------------------------

enum class Linkage { Average, Complete };

inline Linkage parse_linkage(const std::string& s) {
  if (s == "average") return Linkage::Average;
  if (s == "complete") return Linkage::Complete;
  throw std::invalid_argument("linkage must be 'average' or 'complete'");
}

/// Merge record; leaves are 0..n-1 and merge t creates cluster n + t.
struct Merge {
  Index a = 0, b = 0;
  double distance = 0.0;
  Index size = 0;
};

struct ClusterResult {
  std::vector<Index> labels;  // 0-based, numbered by first appearance
  std::vector<Merge> tree;
};

/// Cut a merge tree to k clusters.
inline std::vector<Index> cut_tree(const std::vector<Merge>& tree, Index n, Index k) {
  if (k < 1 || k > n) throw std::invalid_argument("cluster count must lie in [1, n]");
  std::vector<Index> parent(static_cast<std::size_t>(2 * n), -1);
  for (Index t = 0; t < n - k; ++t) {
    parent[static_cast<std::size_t>(tree[static_cast<std::size_t>(t)].a)] = n + t;
    parent[static_cast<std::size_t>(tree[static_cast<std::size_t>(t)].b)] = n + t;
  }
  std::vector<Index> labels(static_cast<std::size_t>(n));
  std::vector<Index> label_of_root(static_cast<std::size_t>(2 * n), -1);
  Index next = 0;
  for (Index i = 0; i < n; ++i) {
    Index r = i;
    while (parent[static_cast<std::size_t>(r)] >= 0) r = parent[static_cast<std::size_t>(r)];
    auto& l = label_of_root[static_cast<std::size_t>(r)];
    if (l < 0) l = next++;
    labels[static_cast<std::size_t>(i)] = l;
  }
  return labels;
}

/// Agglomerative clustering on a full symmetric distance matrix. Among equal
/// distances the pair with the lowest (first, second) leaf index merges first.
inline std::vector<Merge> agglomerate(Eigen::MatrixXd d, Linkage linkage) {
  const Index n = d.rows();
  if (d.cols() != n) throw std::invalid_argument("distance matrix must be square");
  std::vector<Merge> tree;
  if (n < 2) return tree;
  std::vector<bool> active(static_cast<std::size_t>(n), true);
  std::vector<Index> size(static_cast<std::size_t>(n), 1), id(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) id[static_cast<std::size_t>(i)] = i;
  const double inf = std::numeric_limits<double>::infinity();
  // nearest active neighbour with a larger slot index
  std::vector<Index> nn(static_cast<std::size_t>(n), -1);
  std::vector<double> nd(static_cast<std::size_t>(n), inf);
  auto refresh = [&](Index i) {
    nn[static_cast<std::size_t>(i)] = -1;
    nd[static_cast<std::size_t>(i)] = inf;
    for (Index j = i + 1; j < n; ++j)
      if (active[static_cast<std::size_t>(j)] && d(i, j) < nd[static_cast<std::size_t>(i)]) {
        nd[static_cast<std::size_t>(i)] = d(i, j);
        nn[static_cast<std::size_t>(i)] = j;
      }
  };
  for (Index i = 0; i < n; ++i) refresh(i);

  for (Index step = 0; step < n - 1; ++step) {
    Index a = -1;
    for (Index i = 0; i < n; ++i)
      if (active[static_cast<std::size_t>(i)] && nn[static_cast<std::size_t>(i)] >= 0 &&
          (a < 0 || nd[static_cast<std::size_t>(i)] < nd[static_cast<std::size_t>(a)]))
        a = i;
    const Index b = nn[static_cast<std::size_t>(a)];
    const double dist = nd[static_cast<std::size_t>(a)];
    const auto sa = static_cast<double>(size[static_cast<std::size_t>(a)]);
    const auto sb = static_cast<double>(size[static_cast<std::size_t>(b)]);
    for (Index k = 0; k < n; ++k) {
      if (!active[static_cast<std::size_t>(k)] || k == a || k == b) continue;
      const double v = linkage == Linkage::Average ? (sa * d(a, k) + sb * d(b, k)) / (sa + sb)
                                                   : std::max(d(a, k), d(b, k));
      d(a, k) = d(k, a) = v;
    }
    active[static_cast<std::size_t>(b)] = false;
    tree.push_back({std::min(id[static_cast<std::size_t>(a)], id[static_cast<std::size_t>(b)]),
                    std::max(id[static_cast<std::size_t>(a)], id[static_cast<std::size_t>(b)]), dist,
                    size[static_cast<std::size_t>(a)] + size[static_cast<std::size_t>(b)]});
    size[static_cast<std::size_t>(a)] += size[static_cast<std::size_t>(b)];
    id[static_cast<std::size_t>(a)] = n + step;
    for (Index k = 0; k < n; ++k) {
      if (!active[static_cast<std::size_t>(k)]) continue;
      if (k == a || nn[static_cast<std::size_t>(k)] == a || nn[static_cast<std::size_t>(k)] == b) {
        refresh(k);
      } else if (k < a && (d(k, a) < nd[static_cast<std::size_t>(k)] ||
                           (d(k, a) == nd[static_cast<std::size_t>(k)] && a < nn[static_cast<std::size_t>(k)]))) {
        nd[static_cast<std::size_t>(k)] = d(k, a);
        nn[static_cast<std::size_t>(k)] = a;
      }
    }
  }
  return tree;
}

/// Pairwise symmetrized-KL distances between box posteriors.
inline Eigen::MatrixXd kl_distance_matrix(const std::vector<GridBoxPosterior>& posts) {
  const auto n = static_cast<Index>(posts.size());
  std::vector<Eigen::LLT<Eigen::MatrixXd>> llts;
  llts.reserve(posts.size());
  for (const auto& g : posts) {
    if (g.degenerate) throw std::invalid_argument("grid box " + std::to_string(g.location) + " has a degenerate posterior");
    try {
      llts.push_back(detail::checked_llt(g.dist.cov));
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("grid box " + std::to_string(g.location) + " has a degenerate posterior");
    }
  }
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const auto& a = posts[static_cast<std::size_t>(i)].dist;
      const auto& b = posts[static_cast<std::size_t>(j)].dist;
      const auto& la = llts[static_cast<std::size_t>(i)];
      const auto& lb = llts[static_cast<std::size_t>(j)];
      d(i, j) = d(j, i) = std::max(0.0, detail::kl_directed(a, b, la, lb) + detail::kl_directed(b, a, lb, la));
    }
  return d;
}

inline ClusterResult hierarchical_cluster(const std::vector<GridBoxPosterior>& posts, Linkage linkage, Index k) {
  const auto n = static_cast<Index>(posts.size());
  if (n == 0) throw std::invalid_argument("nothing to cluster");
  if (k < 1 || k > n) throw std::invalid_argument("cluster count must lie in [1, n]");
  ClusterResult out;
  out.tree = agglomerate(kl_distance_matrix(posts), linkage);
  out.labels = cut_tree(out.tree, n, k);
  return out;
}

/// Splits posteriors into usable and degenerate (zero-variance) boxes.
inline std::pair<std::vector<GridBoxPosterior>, std::vector<Index>> drop_degenerate(
    const std::vector<GridBoxPosterior>& posts) {
  std::pair<std::vector<GridBoxPosterior>, std::vector<Index>> out;
  for (const auto& g : posts) {
    if (g.degenerate)
      out.second.push_back(g.location);
    else
      out.first.push_back(g);
  }
  return out;
}

// ---- contours --------------------------------------------------------------

/// Chi-square(2) quantile: -2 log(1 - level).
inline double chi2_2_quantile(double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level must lie in (0, 1)");
  return -2.0 * std::log1p(-level);
}

/// Points of {x : (x - mu)' S^{-1} (x - mu) = q} at angles 2 pi k / resolution.
/// The polyline closes from the last point back to the first.
inline std::vector<std::pair<double, double>> contour_ellipse(const Gaussian& g, double level, Index resolution) {
  if (g.mean.size() != 2) throw std::invalid_argument("contours need a bivariate posterior");
  if (resolution < 3) throw std::invalid_argument("contour resolution must be at least 3");
  detail::checked_llt(g.cov);
  const double q = chi2_2_quantile(level);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.cov);
  const Eigen::MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal();
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<std::size_t>(resolution));
  for (Index k = 0; k < resolution; ++k) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(resolution);
    const Eigen::Vector2d x = g.mean + std::sqrt(q) * root * Eigen::Vector2d(std::cos(t), std::sin(t));
    pts.emplace_back(x[0], x[1]);
  }
  return pts;
}

}  // namespace mvmrf
