#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "gte/matrix.hpp"
#include "gte/types.hpp"

namespace gte {

// Directed graph in CSR form. Columns are sorted ascending within each row
// and (row, col) pairs are unique. Node features and labels ride along so a
// Graph is a self-contained training sequence.
struct Graph {
  Index num_nodes = 0;
  std::vector<Index> row_offsets;  // length N+1
  std::vector<Index> col_indices;  // length nnz
  Matrix features;                 // N x f, may be empty
  std::vector<int> labels;         // per-node labels, empty when absent
  std::optional<int> graph_label;

  Index nnz() const { return static_cast<Index>(col_indices.size()); }
  std::span<const Index> neighbors(Index u) const {
    return {col_indices.data() + row_offsets[u],
            static_cast<std::size_t>(row_offsets[u + 1] - row_offsets[u])};
  }
  bool has_edge(Index u, Index v) const;
};

// Builds a canonical Graph from an arbitrary edge list: rows sorted,
// duplicates collapsed. Throws DataError on out-of-range endpoints.
Graph graph_from_edges(Index num_nodes, std::vector<std::pair<Index, Index>> edges);

// Text edge list: one "src dst" pair per line, '#' starts a comment line.
// N = hint when given, else max id + 1.
Graph load_edge_list(std::istream& in, std::optional<Index> num_nodes_hint = {});

// Adds the reverse arc of every edge; used to ingest undirected inputs.
Graph symmetrize(const Graph& g);

Graph add_self_loops(const Graph& g);

// Proportion of nonzero entries in the N x N adjacency matrix.
Real density(const Graph& g);

Graph induced_subgraph(const Graph& g, std::span<const Index> nodes);

std::vector<Index> out_degrees(const Graph& g);
std::vector<Index> in_degrees(const Graph& g);
// Distinct-neighbor degree on the symmetrized structure, self-loops excluded.
std::vector<Index> undirected_degrees(const Graph& g);

// All-pairs shortest-path-distance buckets, capped at max_dist. Pairs beyond
// the cap or disconnected map to the dedicated bucket max_dist + 1. Stored
// sparsely: only pairs within the cap are materialized.
struct SpdTable {
  Index num_nodes = 0;
  int max_dist = 0;
  std::vector<Index> row_offsets;
  std::vector<Index> cols;
  std::vector<std::uint16_t> dist;

  int unreachable_bucket() const { return max_dist + 1; }
  int num_buckets() const { return max_dist + 2; }
  int lookup(Index i, Index j) const;
};

// BFS from every node over the undirected structure (both arc directions
// traversable). Guarded at N <= 20000; beyond that all-pairs BFS is no
// longer a desk-scale operation.
SpdTable spd_table(const Graph& g, int max_dist);

// Feature matrix IO. CSV: one row per node. Binary: magic "GTF1", u64 N,
// u64 f, then N*f little-endian float32 row-major.
Matrix load_features_csv(std::istream& in, Index expected_rows);
Matrix load_features_binary(std::istream& in);
void save_features_binary(std::ostream& out, const Matrix& m);
std::vector<int> load_labels(std::istream& in, Index expected_rows);

}  // namespace gte
