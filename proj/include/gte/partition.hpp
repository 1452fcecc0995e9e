#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "gte/graph.hpp"
#include "gte/types.hpp"

namespace gte {

struct Permutation {
  std::vector<Index> forward;  // old id -> new position
  std::vector<Index> inverse;  // new position -> old id

  Index size() const { return static_cast<Index>(forward.size()); }
  static Permutation identity(Index n);
  bool valid() const;
};

// Cluster-aware node reordering: coarsen by heavy-edge matching, recursively
// bisect the coarse graph (greedy region growth from a pseudo-peripheral
// seed, 5% balance tolerance, <= 10 Fiduccia-Mattheyses refinement passes),
// project part labels back, then order nodes by (part id, original id).
// k must be a power of two in [1, N]. Deterministic for fixed (g, k, seed).
Permutation reorder(const Graph& g, Index k, std::uint64_t seed);

Graph permute_graph(const Graph& g, const Permutation& p);

void save_permutation(std::ostream& out, const Permutation& p);
Permutation load_permutation(std::istream& in);

// Near-equal contiguous ranges over [0, n): sizes differ by at most one.
std::vector<Index> cluster_boundaries(Index n, Index k);

// k x k tiling of the permuted attention layout with per-cell edge counts
// and densities (the per-cluster beta values).
struct ClusterGrid {
  Index k = 1;
  std::vector<Index> boundaries;         // length k+1
  std::vector<std::int64_t> cell_nnz;    // k*k row-major
  std::vector<Real> cell_density;        // k*k row-major

  Index range_size(Index a) const { return boundaries[a + 1] - boundaries[a]; }
  Index cluster_of(Index pos) const;
  std::int64_t total_nnz() const;
};

ClusterGrid build_cluster_grid(const Graph& g, const Permutation& p, Index k);

Real diagonal_edge_fraction(const ClusterGrid& grid);

}  // namespace gte
