#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mvmrf {

using Index = std::ptrdiff_t;

enum class Adjacency { Rook1 };

inline Adjacency parse_adjacency(const std::string& name) {
  if (name == "rook" || name == "rook1" || name == "rook-1st") return Adjacency::Rook1;
  throw std::invalid_argument("unknown adjacency order '" + name + "'");
}

inline std::string to_string(Adjacency a) {
  switch (a) {
    case Adjacency::Rook1: return "rook";
  }
  return "unknown";
}

/// Regular nx-by-ny lattice. Location i = row*nx + col, row 0 is the
/// southern edge. Boundaries are free (no wraparound).
class GridLattice {
public:
  GridLattice(Index nx, Index ny, Adjacency order = Adjacency::Rook1) : nx_(nx), ny_(ny), order_(order) {
    if (nx < 1 || ny < 1) throw std::invalid_argument("grid dimensions must be positive");
    neighbors_.resize(static_cast<std::size_t>(nx * ny));
    for (Index row = 0; row < ny; ++row) {
      for (Index col = 0; col < nx; ++col) {
        auto& nb = neighbors_[static_cast<std::size_t>(row * nx + col)];
        // pushed in increasing index order
        if (row > 0) nb.push_back((row - 1) * nx + col);
        if (col > 0) nb.push_back(row * nx + col - 1);
        if (col + 1 < nx) nb.push_back(row * nx + col + 1);
        if (row + 1 < ny) nb.push_back((row + 1) * nx + col);
      }
    }
  }

  Index nx() const { return nx_; }
  Index ny() const { return ny_; }
  Index size() const { return nx_ * ny_; }
  Adjacency order() const { return order_; }

  const std::vector<Index>& neighbors(Index i) const {
    if (i < 0 || i >= size()) throw std::invalid_argument("location index out of range");
    return neighbors_[static_cast<std::size_t>(i)];
  }

  Index row(Index i) const { return i / nx_; }
  Index col(Index i) const { return i % nx_; }

private:
  Index nx_;
  Index ny_;
  Adjacency order_;
  std::vector<std::vector<Index>> neighbors_;
};

inline GridLattice build_grid_lattice(Index nx, Index ny, Adjacency order = Adjacency::Rook1) {
  return GridLattice(nx, ny, order);
}

struct Edge {
  Index hi;  // hi > lo
  Index lo;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Each undirected adjacency once as (i, k) with i > k, sorted lexicographically.
inline std::vector<Edge> edge_list(const GridLattice& g) {
  std::vector<Edge> out;
  for (Index i = 0; i < g.size(); ++i)
    for (Index k : g.neighbors(i))
      if (k < i) out.push_back({i, k});
  // neighbors are sorted, so the loop above already yields lexicographic order
  return out;
}

/// p variables stacked on every location of a grid, location-major:
/// flat(i, j) = i*p + j.
class StackedLattice {
public:
  StackedLattice(GridLattice grid, Index p) : grid_(std::move(grid)), p_(p) {
    if (p < 1) throw std::invalid_argument("number of variables must be positive");
  }

  const GridLattice& grid() const { return grid_; }
  Index n() const { return grid_.size(); }
  Index p() const { return p_; }
  Index dim() const { return grid_.size() * p_; }

  Index flat_index(Index i, Index j) const {
    if (i < 0 || i >= n() || j < 0 || j >= p_) throw std::invalid_argument("flat_index: index out of range");
    return i * p_ + j;
  }

  std::pair<Index, Index> unflatten(Index a) const {
    if (a < 0 || a >= dim()) throw std::invalid_argument("unflatten: index out of range");
    return {a / p_, a % p_};
  }

private:
  GridLattice grid_;
  Index p_;
};

inline Index flat_index(const StackedLattice& s, Index i, Index j) { return s.flat_index(i, j); }

}  // namespace mvmrf
