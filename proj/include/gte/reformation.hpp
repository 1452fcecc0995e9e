#pragma once

#include <map>
#include <utility>
#include <vector>

#include "gte/attention.hpp"
#include "gte/partition.hpp"
#include "gte/types.hpp"

namespace gte {

struct SubBlock {
  Index row = 0;  // origin within the cell
  Index col = 0;
  friend bool operator==(const SubBlock&, const SubBlock&) = default;
};

enum class CellState { Untouched, Transferred };
enum class TransferStrategy { Indolent, Elastic };

// The reformed attention pattern: untouched cells keep their original edges,
// transferred cells replace them with packed d_b x d_b sub-blocks. Edges not
// covered by any tile are dropped and counted.
struct ClusterSparseLayout {
  Index seq_len = 0;
  Index k = 1;
  Index d_b = 1;
  std::vector<Index> boundaries;                  // k+1
  std::vector<CellState> cell_state;              // k*k row-major
  std::vector<std::vector<SubBlock>> cell_blocks; // k*k, cell-local origins
  std::int64_t dropped_edges = 0;
  AttnPattern pattern;  // materialized attended pairs

  Index transferred_cells() const;
  std::int64_t subblock_count() const;
};

// Greedily places ceil(nnz / d_b^2) non-overlapping d_b x d_b tiles inside an
// n_rows x n_cols cell, each step taking the tile covering the most not-yet-
// covered edges (ties: smallest (row, col) origin). Placement stops early
// only if no non-overlapping origin remains.
std::vector<SubBlock> pack_subblocks(std::span<const std::pair<Index, Index>> cell_edges,
                                     Index n_rows, Index n_cols, Index d_b);

// g_perm must be in the grid's (permuted) coordinate system. Indolent
// transfers cells with beta_C < beta_G; Elastic those with beta_C < beta_thre.
ClusterSparseLayout build_layout(const ClusterGrid& grid, const Graph& g_perm,
                                 TransferStrategy strategy, Real beta_thre, Real beta_g,
                                 Index d_b);

// Attention over the reformed pattern; bias/weight_mult align with
// layout.pattern. Bias for pairs fabricated by sub-blocks is the caller's
// concern (0 is the neutral choice).
AttnResult cluster_sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                    const ClusterSparseLayout& layout,
                                    std::span<const Real> bias = {},
                                    std::span<const Real> weight_mult = {});

void dump_layout(std::ostream& out, const ClusterSparseLayout& layout, const ClusterGrid& grid);

// Loss-descent-rate controller over the discrete threshold set
// {0, bG, 1.5bG, 5bG, 7bG, 10bG, 1} (clamped to [0,1], de-duplicated).
struct TunerState {
  Real avg_loss = 0.0;  // F_t, 0.9/0.1 exponential running average
  std::vector<std::pair<Index, Real>> ldr_history;
  std::vector<Real> thresholds;
  std::size_t idx = 0;
  Index delta = 10;
  bool has_loss = false;

  Real beta_thre() const { return thresholds[idx]; }
};

TunerState make_tuner_state(Real beta_g, Index delta = 10);

// One update per epoch, epochs consecutive from 0. The first call only
// initializes F; afterwards, when epoch >= delta, LDR_t >= LDR_{t-delta}
// steps the threshold up and LDR_t < LDR_{t-delta} steps it down.
void tuner_update(TunerState& state, Real loss, Real epoch_time_s, Index epoch);

// floor(sqrt(l2_bytes / (i * hidden_dim))), rounded down to a power of two.
Index select_k(std::int64_t l2_bytes, Index hidden_dim, Index i);

// Argmax throughput; ties resolved toward the median candidate (upper median
// when equidistant).
Index select_db(const std::map<Index, Real>& profile);

}  // namespace gte
