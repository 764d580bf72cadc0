#pragma once

// Sparse Cholesky in three stages: fill-reducing ordering, symbolic
// analysis (elimination tree and factor structure), numeric factorization.
// The first two depend only on the sparsity pattern and are computed once
// per pattern; the numeric stage is rerun for every new set of values.

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "mvmrf/sparse_matrix.hpp"

namespace mvmrf {

using Permutation = std::vector<Index>;  // perm[new] = old

inline bool is_permutation(const Permutation& perm, Index dim) {
  if (static_cast<Index>(perm.size()) != dim) return false;
  std::vector<char> seen(perm.size(), 0);
  for (Index v : perm) {
    if (v < 0 || v >= dim || seen[static_cast<std::size_t>(v)]) return false;
    seen[static_cast<std::size_t>(v)] = 1;
  }
  return true;
}

inline Permutation identity_permutation(Index dim) {
  Permutation p(static_cast<std::size_t>(dim));
  for (Index k = 0; k < dim; ++k) p[static_cast<std::size_t>(k)] = k;
  return p;
}

/// Minimum-degree ordering on the explicit elimination graph. Indices are
/// grouped into consecutive blocks of `block` (one block per lattice
/// location for a stacked precision), the ordering is computed on the block
/// quotient graph and expanded back, so the result is location-major.
/// Ties go to the lowest index, which makes the result deterministic.
inline Permutation compute_ordering(const SparsePattern& pattern, Index block = 1) {
  if (block < 1 || pattern.dim % block != 0) throw std::invalid_argument("compute_ordering: bad block size");
  const Index nb = pattern.dim / block;
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(nb));
  for (Index c = 0; c < pattern.dim; ++c) {
    const Index bc = c / block;
    for (Index q = pattern.col_ptr[c]; q < pattern.col_ptr[c + 1]; ++q) {
      const Index br = pattern.row_idx[q] / block;
      if (br != bc) adj[static_cast<std::size_t>(bc)].push_back(br);
    }
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }

  std::set<std::pair<Index, Index>> queue;  // (degree, node)
  for (Index v = 0; v < nb; ++v) queue.insert({static_cast<Index>(adj[static_cast<std::size_t>(v)].size()), v});

  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(nb));
  std::vector<Index> merged;
  while (!queue.empty()) {
    const Index v = queue.begin()->second;
    queue.erase(queue.begin());
    order.push_back(v);
    const std::vector<Index> clique = std::move(adj[static_cast<std::size_t>(v)]);
    adj[static_cast<std::size_t>(v)].clear();
    for (Index u : clique) {
      auto& au = adj[static_cast<std::size_t>(u)];
      queue.erase({static_cast<Index>(au.size()), u});
      merged.clear();
      std::set_union(au.begin(), au.end(), clique.begin(), clique.end(), std::back_inserter(merged));
      au.clear();
      for (Index w : merged)
        if (w != u && w != v) au.push_back(w);
      queue.insert({static_cast<Index>(au.size()), u});
    }
  }

  Permutation perm;
  perm.reserve(static_cast<std::size_t>(pattern.dim));
  for (Index b : order)
    for (Index j = 0; j < block; ++j) perm.push_back(b * block + j);
  return perm;
}

/// Value-independent part of the factorization. Holds the permuted upper
/// triangle's structure, the elimination tree and the full structure of L,
/// so a numeric refactorization only scatters values and does arithmetic.
struct SymbolicFactor {
  std::shared_ptr<const SparsePattern> input;
  Permutation perm;  // perm[new] = old
  Permutation pinv;  // pinv[old] = new
  std::vector<Index> parent;

  // Upper triangle of P*A*P' (CSC). src maps each entry to the input value slot.
  std::vector<Index> c_ptr, c_row, c_src;

  // L in CSC; the diagonal is the first entry of every column.
  std::vector<Index> l_ptr, l_row;
  // Row pattern of L(k, 0:k-1) in the order the up-looking sweep visits it,
  // and for each visited (k, j) the slot in L where L(k, j) is stored.
  std::vector<Index> r_ptr, r_col, r_slot;

  Index dim() const { return static_cast<Index>(perm.size()); }
  Index nnz_l() const { return static_cast<Index>(l_row.size()); }

  /// Entries of L not present in the lower triangle of P*A*P'.
  Index fill_in() const { return nnz_l() - static_cast<Index>(c_row.size()); }

  friend bool operator==(const SymbolicFactor& a, const SymbolicFactor& b) {
    return *a.input == *b.input && a.perm == b.perm && a.parent == b.parent && a.l_ptr == b.l_ptr &&
           a.l_row == b.l_row && a.r_col == b.r_col;
  }
};

namespace detail {

// Nonzero pattern of row k of L (CSparse ereach), written to s[top..dim).
inline Index ereach(const SymbolicFactor& s, Index k, std::vector<Index>& stack, std::vector<Index>& mark) {
  const Index n = s.dim();
  Index top = n;
  mark[static_cast<std::size_t>(k)] = k;
  for (Index q = s.c_ptr[k]; q < s.c_ptr[k + 1]; ++q) {
    Index i = s.c_row[q];
    if (i > k) continue;
    Index len = 0;
    std::vector<Index> path;
    for (; mark[static_cast<std::size_t>(i)] != k; i = s.parent[static_cast<std::size_t>(i)]) {
      path.push_back(i);
      mark[static_cast<std::size_t>(i)] = k;
      ++len;
    }
    while (len > 0) stack[static_cast<std::size_t>(--top)] = path[static_cast<std::size_t>(--len)];
  }
  return top;
}

}  // namespace detail

inline SymbolicFactor symbolic_factorize(std::shared_ptr<const SparsePattern> pattern, const Permutation& perm) {
  if (!pattern) throw std::invalid_argument("symbolic_factorize: null pattern");
  const SparsePattern& a = *pattern;
  const Index n = a.dim;
  if (!is_permutation(perm, n)) throw std::invalid_argument("symbolic_factorize: invalid permutation");

  SymbolicFactor s;
  s.input = pattern;
  s.perm = perm;
  s.pinv.assign(static_cast<std::size_t>(n), 0);
  for (Index k = 0; k < n; ++k) s.pinv[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] = k;

  // Upper triangle of C = P*A*P', columns by new index, rows sorted.
  std::vector<std::vector<std::pair<Index, Index>>> cols(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    const Index cj = s.pinv[static_cast<std::size_t>(j)];
    for (Index q = a.col_ptr[j]; q < a.col_ptr[j + 1]; ++q) {
      const Index ci = s.pinv[static_cast<std::size_t>(a.row_idx[q])];
      if (ci <= cj) cols[static_cast<std::size_t>(cj)].push_back({ci, q});
    }
  }
  s.c_ptr.assign(static_cast<std::size_t>(n) + 1, 0);
  for (Index k = 0; k < n; ++k) {
    auto& col = cols[static_cast<std::size_t>(k)];
    std::sort(col.begin(), col.end());
    for (auto [r, src] : col) {
      s.c_row.push_back(r);
      s.c_src.push_back(src);
    }
    s.c_ptr[static_cast<std::size_t>(k) + 1] = static_cast<Index>(s.c_row.size());
  }

  // Elimination tree (Liu's algorithm with path compression).
  s.parent.assign(static_cast<std::size_t>(n), -1);
  {
    std::vector<Index> ancestor(static_cast<std::size_t>(n), -1);
    for (Index k = 0; k < n; ++k) {
      for (Index q = s.c_ptr[k]; q < s.c_ptr[k + 1]; ++q) {
        Index i = s.c_row[q];
        while (i != -1 && i < k) {
          const Index next = ancestor[static_cast<std::size_t>(i)];
          ancestor[static_cast<std::size_t>(i)] = k;
          if (next == -1) s.parent[static_cast<std::size_t>(i)] = k;
          i = next;
        }
      }
    }
  }

  // Row patterns, then column counts, then the slot of every L(k, j).
  std::vector<Index> stack(static_cast<std::size_t>(n)), mark(static_cast<std::size_t>(n), -1);
  std::vector<Index> counts(static_cast<std::size_t>(n), 1);
  s.r_ptr.assign(static_cast<std::size_t>(n) + 1, 0);
  for (Index k = 0; k < n; ++k) {
    const Index top = detail::ereach(s, k, stack, mark);
    for (Index t = top; t < n; ++t) {
      const Index j = stack[static_cast<std::size_t>(t)];
      s.r_col.push_back(j);
      ++counts[static_cast<std::size_t>(j)];
    }
    s.r_ptr[static_cast<std::size_t>(k) + 1] = static_cast<Index>(s.r_col.size());
  }
  s.l_ptr.assign(static_cast<std::size_t>(n) + 1, 0);
  for (Index k = 0; k < n; ++k) s.l_ptr[static_cast<std::size_t>(k) + 1] = s.l_ptr[static_cast<std::size_t>(k)] + counts[static_cast<std::size_t>(k)];
  s.l_row.assign(static_cast<std::size_t>(s.l_ptr.back()), -1);
  s.r_slot.resize(s.r_col.size());
  std::vector<Index> fill(s.l_ptr.begin(), s.l_ptr.end() - 1);
  for (Index k = 0; k < n; ++k) {
    for (Index t = s.r_ptr[static_cast<std::size_t>(k)]; t < s.r_ptr[static_cast<std::size_t>(k) + 1]; ++t) {
      const Index j = s.r_col[static_cast<std::size_t>(t)];
      const Index slot = ++fill[static_cast<std::size_t>(j)];
      s.l_row[static_cast<std::size_t>(slot)] = k;
      s.r_slot[static_cast<std::size_t>(t)] = slot;
    }
    s.l_row[static_cast<std::size_t>(s.l_ptr[static_cast<std::size_t>(k)])] = k;
  }
  return s;
}

inline SymbolicFactor symbolic_factorize(const SparsePrecision& q, const Permutation& perm) {
  return symbolic_factorize(q.pattern_ptr(), perm);
}

/// Numeric values of L for P*Q*P' = L*L'.
class CholFactor {
public:
  CholFactor(std::shared_ptr<const SymbolicFactor> symbolic, std::vector<double> lx)
      : symbolic_(std::move(symbolic)), lx_(std::move(lx)) {}

  const SymbolicFactor& symbolic() const { return *symbolic_; }
  const std::shared_ptr<const SymbolicFactor>& symbolic_ptr() const { return symbolic_; }
  const std::vector<double>& values() const { return lx_; }
  Index dim() const { return symbolic_->dim(); }

  double diag(Index k) const { return lx_[static_cast<std::size_t>(symbolic_->l_ptr[static_cast<std::size_t>(k)])]; }

  /// L as a dense matrix in the permuted ordering (testing aid).
  Eigen::MatrixXd dense_l() const {
    const auto& s = *symbolic_;
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(dim(), dim());
    for (Index j = 0; j < dim(); ++j)
      for (Index q = s.l_ptr[static_cast<std::size_t>(j)]; q < s.l_ptr[static_cast<std::size_t>(j) + 1]; ++q)
        l(s.l_row[static_cast<std::size_t>(q)], j) = lx_[static_cast<std::size_t>(q)];
    return l;
  }

  // In-place solves in the permuted ordering.
  void forward(Eigen::VectorXd& x) const {  // L y = x
    const auto& s = *symbolic_;
    for (Index j = 0; j < dim(); ++j) {
      const Index q0 = s.l_ptr[static_cast<std::size_t>(j)];
      x[j] /= lx_[static_cast<std::size_t>(q0)];
      const double xj = x[j];
      for (Index q = q0 + 1; q < s.l_ptr[static_cast<std::size_t>(j) + 1]; ++q)
        x[s.l_row[static_cast<std::size_t>(q)]] -= lx_[static_cast<std::size_t>(q)] * xj;
    }
  }

  void backward(Eigen::VectorXd& x) const {  // L' y = x
    const auto& s = *symbolic_;
    for (Index j = dim() - 1; j >= 0; --j) {
      const Index q0 = s.l_ptr[static_cast<std::size_t>(j)];
      double acc = x[j];
      for (Index q = q0 + 1; q < s.l_ptr[static_cast<std::size_t>(j) + 1]; ++q)
        acc -= lx_[static_cast<std::size_t>(q)] * x[s.l_row[static_cast<std::size_t>(q)]];
      x[j] = acc / lx_[static_cast<std::size_t>(q0)];
    }
  }

private:
  std::shared_ptr<const SymbolicFactor> symbolic_;
  std::vector<double> lx_;
};

/// Relative pivot threshold: a pivot must exceed this times max diag(Q).
inline constexpr double kPivotTolerance = 1e-12;

/// Up-looking numeric factorization on a precomputed structure. Returns
/// nullopt when a pivot falls at or below the tolerance (matrix not PD).
inline std::optional<CholFactor> numeric_factorize(const std::shared_ptr<const SymbolicFactor>& symbolic,
                                                   const SparsePrecision& q) {
  const SymbolicFactor& s = *symbolic;
  if (q.pattern_ptr() != s.input && !(q.pattern() == *s.input))
    throw std::invalid_argument("numeric_factorize: matrix pattern does not match the symbolic factor");
  const Index n = s.dim();
  const auto& qv = q.values();
  const double tol = kPivotTolerance * q.max_diagonal();

  std::vector<double> lx(static_cast<std::size_t>(s.nnz_l()), 0.0);
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);
  std::vector<Index> fill(s.l_ptr.begin(), s.l_ptr.end() - 1);
  for (Index k = 0; k < n; ++k) {
    for (Index p = s.c_ptr[static_cast<std::size_t>(k)]; p < s.c_ptr[static_cast<std::size_t>(k) + 1]; ++p)
      x[static_cast<std::size_t>(s.c_row[static_cast<std::size_t>(p)])] = qv[static_cast<std::size_t>(s.c_src[static_cast<std::size_t>(p)])];
    double d = x[static_cast<std::size_t>(k)];
    x[static_cast<std::size_t>(k)] = 0.0;
    for (Index t = s.r_ptr[static_cast<std::size_t>(k)]; t < s.r_ptr[static_cast<std::size_t>(k) + 1]; ++t) {
      const Index j = s.r_col[static_cast<std::size_t>(t)];
      const Index j0 = s.l_ptr[static_cast<std::size_t>(j)];
      const double lkj = x[static_cast<std::size_t>(j)] / lx[static_cast<std::size_t>(j0)];
      x[static_cast<std::size_t>(j)] = 0.0;
      for (Index p = j0 + 1; p < fill[static_cast<std::size_t>(j)] + 1; ++p)
        x[static_cast<std::size_t>(s.l_row[static_cast<std::size_t>(p)])] -= lx[static_cast<std::size_t>(p)] * lkj;
      d -= lkj * lkj;
      ++fill[static_cast<std::size_t>(j)];
      lx[static_cast<std::size_t>(s.r_slot[static_cast<std::size_t>(t)])] = lkj;
    }
    if (!(d > tol)) return std::nullopt;
    lx[static_cast<std::size_t>(s.l_ptr[static_cast<std::size_t>(k)])] = std::sqrt(d);
  }
  return CholFactor(symbolic, std::move(lx));
}

/// Ordering, symbolic and numeric stages from scratch.
inline std::optional<CholFactor> factorize(const SparsePrecision& q, Index block = 1) {
  auto sym = std::make_shared<const SymbolicFactor>(symbolic_factorize(q, compute_ordering(q.pattern(), block)));
  return numeric_factorize(sym, q);
}

inline bool check_positive_definite(const SparsePrecision& q, const std::shared_ptr<const SymbolicFactor>& symbolic) {
  return numeric_factorize(symbolic, q).has_value();
}

inline bool check_positive_definite(const SparsePrecision& q) { return factorize(q).has_value(); }

/// Solves Q x = rhs.
inline Eigen::VectorXd solve(const CholFactor& f, const Eigen::VectorXd& rhs) {
  if (rhs.size() != f.dim()) throw std::invalid_argument("solve: dimension mismatch");
  const auto& perm = f.symbolic().perm;
  const Index n = f.dim();
  Eigen::VectorXd y(n);
  for (Index k = 0; k < n; ++k) y[k] = rhs[perm[static_cast<std::size_t>(k)]];
  f.forward(y);
  f.backward(y);
  Eigen::VectorXd x(n);
  for (Index k = 0; k < n; ++k) x[perm[static_cast<std::size_t>(k)]] = y[k];
  return x;
}

inline double log_det(const CholFactor& f) {
  double acc = 0.0;
  for (Index k = 0; k < f.dim(); ++k) acc += std::log(f.diag(k));
  return 2.0 * acc;
}

/// x = mean + P' L^{-T} z with z standard normal, so x ~ N(mean, Q^{-1}).
template <class Urbg>
Eigen::VectorXd sample_gmrf(const CholFactor& f, const Eigen::VectorXd& mean, Urbg& rng) {
  if (mean.size() != f.dim()) throw std::invalid_argument("sample_gmrf: dimension mismatch");
  const Index n = f.dim();
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(n);
  for (Index k = 0; k < n; ++k) z[k] = normal(rng);
  f.backward(z);
  Eigen::VectorXd x = mean;
  const auto& perm = f.symbolic().perm;
  for (Index k = 0; k < n; ++k) x[perm[static_cast<std::size_t>(k)]] += z[k];
  return x;
}

}  // namespace mvmrf
