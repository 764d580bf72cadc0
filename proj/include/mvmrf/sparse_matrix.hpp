#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "mvmrf/lattice_graph.hpp"

namespace mvmrf {

/// Compressed-column structure of a symmetric matrix. Both triangles are
/// stored; row indices are sorted within each column.
struct SparsePattern {
  Index dim = 0;
  std::vector<Index> col_ptr;  // size dim+1
  std::vector<Index> row_idx;
  std::vector<Index> diag_pos;  // position of (k,k) in row_idx, or -1

  Index nnz() const { return static_cast<Index>(row_idx.size()); }

  Index find(Index row, Index col) const {
    auto first = row_idx.begin() + col_ptr[col];
    auto last = row_idx.begin() + col_ptr[col + 1];
    auto it = std::lower_bound(first, last, row);
    if (it == last || *it != row) return -1;
    return static_cast<Index>(it - row_idx.begin());
  }

  bool is_symmetric() const {
    for (Index c = 0; c < dim; ++c)
      for (Index q = col_ptr[c]; q < col_ptr[c + 1]; ++q)
        if (find(c, row_idx[q]) < 0) return false;
    return true;
  }

  friend bool operator==(const SparsePattern& a, const SparsePattern& b) {
    return a.dim == b.dim && a.col_ptr == b.col_ptr && a.row_idx == b.row_idx;
  }

  /// Build from per-column row lists (duplicates removed, sorted).
  static SparsePattern from_columns(std::vector<std::vector<Index>> cols) {
    SparsePattern p;
    p.dim = static_cast<Index>(cols.size());
    p.col_ptr.assign(cols.size() + 1, 0);
    for (std::size_t c = 0; c < cols.size(); ++c) {
      auto& rows = cols[c];
      std::sort(rows.begin(), rows.end());
      rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
      for (Index r : rows)
        if (r < 0 || r >= p.dim) throw std::invalid_argument("pattern row index out of range");
      p.col_ptr[c + 1] = p.col_ptr[c] + static_cast<Index>(rows.size());
      p.row_idx.insert(p.row_idx.end(), rows.begin(), rows.end());
    }
    p.diag_pos.resize(cols.size());
    for (Index c = 0; c < p.dim; ++c) p.diag_pos[static_cast<std::size_t>(c)] = p.find(c, c);
    return p;
  }
};

/// Symmetric sparse matrix sharing an immutable pattern. Matrices built on
/// the same pattern object can reuse one symbolic factorization.
class SparsePrecision {
public:
  SparsePrecision() = default;
  SparsePrecision(std::shared_ptr<const SparsePattern> pattern, std::vector<double> values)
      : pattern_(std::move(pattern)), values_(std::move(values)) {
    if (!pattern_ || static_cast<Index>(values_.size()) != pattern_->nnz())
      throw std::invalid_argument("value count does not match pattern");
  }

  static SparsePrecision from_dense(const Eigen::MatrixXd& a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("matrix must be square");
    std::vector<std::vector<Index>> cols(static_cast<std::size_t>(a.cols()));
    for (Index c = 0; c < a.cols(); ++c)
      for (Index r = 0; r < a.rows(); ++r)
        if (a(r, c) != 0.0 || a(c, r) != 0.0 || r == c) cols[static_cast<std::size_t>(c)].push_back(r);
    auto pat = std::make_shared<const SparsePattern>(SparsePattern::from_columns(std::move(cols)));
    std::vector<double> vals(static_cast<std::size_t>(pat->nnz()));
    for (Index c = 0; c < pat->dim; ++c)
      for (Index q = pat->col_ptr[c]; q < pat->col_ptr[c + 1]; ++q)
        vals[static_cast<std::size_t>(q)] = a(pat->row_idx[q], c);
    return SparsePrecision(std::move(pat), std::move(vals));
  }

  Index dim() const { return pattern_ ? pattern_->dim : 0; }
  Index nnz() const { return pattern_ ? pattern_->nnz() : 0; }
  const SparsePattern& pattern() const { return *pattern_; }
  const std::shared_ptr<const SparsePattern>& pattern_ptr() const { return pattern_; }
  const std::vector<double>& values() const { return values_; }

  double coeff(Index row, Index col) const {
    Index q = pattern_->find(row, col);
    return q < 0 ? 0.0 : values_[static_cast<std::size_t>(q)];
  }

  Eigen::MatrixXd to_dense() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(dim(), dim());
    for (Index c = 0; c < dim(); ++c)
      for (Index q = pattern_->col_ptr[c]; q < pattern_->col_ptr[c + 1]; ++q)
        out(pattern_->row_idx[q], c) = values_[static_cast<std::size_t>(q)];
    return out;
  }

  Eigen::VectorXd multiply(const Eigen::VectorXd& x) const {
    if (x.size() != dim()) throw std::invalid_argument("multiply: dimension mismatch");
    Eigen::VectorXd y = Eigen::VectorXd::Zero(dim());
    for (Index c = 0; c < dim(); ++c) {
      const double xc = x[c];
      for (Index q = pattern_->col_ptr[c]; q < pattern_->col_ptr[c + 1]; ++q)
        y[pattern_->row_idx[q]] += values_[static_cast<std::size_t>(q)] * xc;
    }
    return y;
  }

  double quad_form(const Eigen::VectorXd& x) const { return x.dot(multiply(x)); }

  double max_diagonal() const {
    double m = 0.0;
    for (Index c = 0; c < dim(); ++c) {
      Index q = pattern_->diag_pos[static_cast<std::size_t>(c)];
      if (q >= 0) m = std::max(m, values_[static_cast<std::size_t>(q)]);
    }
    return m;
  }

  /// scale*this + diag(d), same pattern. Every diagonal entry must be present.
  SparsePrecision scaled_plus_diagonal(double scale, const Eigen::VectorXd& d) const {
    if (d.size() != dim()) throw std::invalid_argument("diagonal length mismatch");
    std::vector<double> v(values_.size());
    for (std::size_t q = 0; q < v.size(); ++q) v[q] = scale * values_[q];
    for (Index c = 0; c < dim(); ++c) {
      Index q = pattern_->diag_pos[static_cast<std::size_t>(c)];
      if (q < 0) throw std::invalid_argument("pattern lacks a diagonal entry");
      v[static_cast<std::size_t>(q)] += d[c];
    }
    return SparsePrecision(pattern_, std::move(v));
  }

  /// Coordinate dump: one "row col value" line per stored entry.
  void write_coordinates(std::ostream& os) const {
    const auto old = os.precision(17);
    for (Index c = 0; c < dim(); ++c)
      for (Index q = pattern_->col_ptr[c]; q < pattern_->col_ptr[c + 1]; ++q)
        os << pattern_->row_idx[q] << ' ' << c << ' ' << values_[static_cast<std::size_t>(q)] << '\n';
    os.precision(old);
  }

private:
  std::shared_ptr<const SparsePattern> pattern_;
  std::vector<double> values_;
};

}  // namespace mvmrf
