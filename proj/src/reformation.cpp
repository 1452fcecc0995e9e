#include "gte/reformation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

namespace gte {

namespace {

// 2D prefix sums over the not-yet-covered edge indicator of one cell.
struct CoverageField {
  Index rows, cols;
  std::vector<std::int32_t> grid;  // rows x cols, 1 = uncovered edge
  std::vector<std::int64_t> pre;   // (rows+1) x (cols+1)

  CoverageField(Index r, Index c) : rows(r), cols(c), grid(static_cast<std::size_t>(r * c), 0) {}

  void rebuild() {
    pre.assign(static_cast<std::size_t>((rows + 1) * (cols + 1)), 0);
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) {
        pre[(i + 1) * (cols + 1) + (j + 1)] = pre[i * (cols + 1) + (j + 1)] +
                                              pre[(i + 1) * (cols + 1) + j] -
                                              pre[i * (cols + 1) + j] + grid[i * cols + j];
      }
    }
  }

  std::int64_t tile_sum(Index r, Index c, Index d) const {
    return pre[(r + d) * (cols + 1) + (c + d)] - pre[r * (cols + 1) + (c + d)] -
           pre[(r + d) * (cols + 1) + c] + pre[r * (cols + 1) + c];
  }
};

bool tiles_overlap(const SubBlock& a, const SubBlock& b, Index d_b) {
  return std::abs(a.row - b.row) < d_b && std::abs(a.col - b.col) < d_b;
}

}  // namespace

Index ClusterSparseLayout::transferred_cells() const {
  return static_cast<Index>(
      std::count(cell_state.begin(), cell_state.end(), CellState::Transferred));
}

std::int64_t ClusterSparseLayout::subblock_count() const {
  std::int64_t n = 0;
  for (const auto& blocks : cell_blocks) n += static_cast<std::int64_t>(blocks.size());
  return n;
}

std::vector<SubBlock> pack_subblocks(std::span<const std::pair<Index, Index>> cell_edges,
                                     Index n_rows, Index n_cols, Index d_b) {
  if (d_b < 1) throw ConfigError("pack_subblocks: d_b must be >= 1");
  if (d_b > n_rows || d_b > n_cols) {
    throw ConfigError("pack_subblocks: d_b " + std::to_string(d_b) + " too large for " +
                      std::to_string(n_rows) + "x" + std::to_string(n_cols) + " cell");
  }
  if (cell_edges.empty()) return {};

  CoverageField field(n_rows, n_cols);
  for (const auto& [r, c] : cell_edges) {
    if (r < 0 || r >= n_rows || c < 0 || c >= n_cols) {
      throw ConfigError("pack_subblocks: edge outside cell");
    }
    field.grid[static_cast<std::size_t>(r * n_cols + c)] = 1;
  }

  const std::int64_t nnz = static_cast<std::int64_t>(cell_edges.size());
  const std::int64_t want = (nnz + d_b * d_b - 1) / (d_b * d_b);

  std::vector<SubBlock> tiles;
  tiles.reserve(static_cast<std::size_t>(want));
  while (static_cast<std::int64_t>(tiles.size()) < want) {
    field.rebuild();
    SubBlock best{-1, -1};
    std::int64_t best_cover = -1;
    for (Index r = 0; r + d_b <= n_rows; ++r) {
      for (Index c = 0; c + d_b <= n_cols; ++c) {
        SubBlock cand{r, c};
        bool clash = false;
        for (const SubBlock& t : tiles) {
          if (tiles_overlap(cand, t, d_b)) {
            clash = true;
            break;
          }
        }
        if (clash) continue;
        std::int64_t cover = field.tile_sum(r, c, d_b);
        if (cover > best_cover) {
          best_cover = cover;
          best = cand;
        }
      }
    }
    if (best_cover < 0) break;  // no non-overlapping origin left
    tiles.push_back(best);
    for (Index r = best.row; r < best.row + d_b; ++r) {
      for (Index c = best.col; c < best.col + d_b; ++c) {
        field.grid[static_cast<std::size_t>(r * n_cols + c)] = 0;
      }
    }
  }
  return tiles;
}

ClusterSparseLayout build_layout(const ClusterGrid& grid, const Graph& g_perm,
                                 TransferStrategy strategy, Real beta_thre, Real beta_g,
                                 Index d_b) {
  const Index k = grid.k;
  const Index n = g_perm.num_nodes;
  if (grid.boundaries.back() != n) throw ConfigError("build_layout: grid/graph size mismatch");
  if (grid.total_nnz() != g_perm.nnz()) throw ConfigError("build_layout: grid/graph nnz mismatch");

  const Real threshold = strategy == TransferStrategy::Indolent ? beta_g : beta_thre;

  ClusterSparseLayout layout;
  layout.seq_len = n;
  layout.k = k;
  layout.d_b = d_b;
  layout.boundaries = grid.boundaries;
  layout.cell_state.assign(static_cast<std::size_t>(k * k), CellState::Untouched);
  layout.cell_blocks.assign(static_cast<std::size_t>(k * k), {});

  // Bucket edges per cell once, in cell-local coordinates.
  std::vector<std::vector<std::pair<Index, Index>>> cell_edges(static_cast<std::size_t>(k * k));
  for (Index u = 0; u < n; ++u) {
    Index a = grid.cluster_of(u);
    for (Index v : g_perm.neighbors(u)) {
      Index b = grid.cluster_of(v);
      cell_edges[static_cast<std::size_t>(a * k + b)].emplace_back(u - grid.boundaries[a],
                                                                   v - grid.boundaries[b]);
    }
  }

  for (Index a = 0; a < k; ++a) {
    for (Index b = 0; b < k; ++b) {
      std::size_t cell = static_cast<std::size_t>(a * k + b);
      if (grid.cell_density[cell] >= threshold) continue;
      layout.cell_state[cell] = CellState::Transferred;
      if (cell_edges[cell].empty()) continue;
      auto tiles = pack_subblocks(cell_edges[cell], grid.range_size(a), grid.range_size(b), d_b);
      // Count original edges covered by the tiles; the rest are dropped.
      std::int64_t covered = 0;
      for (const auto& [r, c] : cell_edges[cell]) {
        for (const SubBlock& t : tiles) {
          if (r >= t.row && r < t.row + d_b && c >= t.col && c < t.col + d_b) {
            ++covered;
            break;
          }
        }
      }
      layout.dropped_edges += static_cast<std::int64_t>(cell_edges[cell].size()) - covered;
      layout.cell_blocks[cell] = std::move(tiles);
    }
  }

  // Materialize the attended pairs row by row; cells are visited in column
  // order so each row comes out sorted without a final sort.
  layout.pattern.rows = n;
  layout.pattern.row_offsets.assign(static_cast<std::size_t>(n) + 1, 0);
  for (Index u = 0; u < n; ++u) {
    Index a = grid.cluster_of(u);
    Index local_r = u - grid.boundaries[a];
    for (Index b = 0; b < k; ++b) {
      std::size_t cell = static_cast<std::size_t>(a * k + b);
      if (layout.cell_state[cell] == CellState::Untouched) {
        auto nb = g_perm.neighbors(u);
        auto lo = std::lower_bound(nb.begin(), nb.end(), grid.boundaries[b]);
        auto hi = std::lower_bound(nb.begin(), nb.end(), grid.boundaries[b + 1]);
        for (auto it = lo; it != hi; ++it) layout.pattern.cols.push_back(*it);
      } else {
        // Tiles within a cell never overlap, but several can intersect this
        // row; emit their column ranges in sorted order.
        std::vector<std::pair<Index, Index>> spans;
        for (const SubBlock& t : layout.cell_blocks[cell]) {
          if (local_r >= t.row && local_r < t.row + d_b) {
            spans.emplace_back(t.col, t.col + d_b);
          }
        }
        std::sort(spans.begin(), spans.end());
        for (const auto& [c0, c1] : spans) {
          for (Index c = c0; c < c1; ++c) layout.pattern.cols.push_back(grid.boundaries[b] + c);
        }
      }
    }
    layout.pattern.row_offsets[static_cast<std::size_t>(u) + 1] =
        static_cast<Index>(layout.pattern.cols.size());
  }
  return layout;
}

AttnResult cluster_sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                    const ClusterSparseLayout& layout, std::span<const Real> bias,
                                    std::span<const Real> weight_mult) {
  if (layout.seq_len != q.rows()) {
    throw ConfigError("cluster_sparse_attention: layout/sequence length mismatch");
  }
  return sparse_attention(q, k, v, layout.pattern, bias, weight_mult);
}

void dump_layout(std::ostream& out, const ClusterSparseLayout& layout, const ClusterGrid& grid) {
  out << "k " << layout.k << " d_b " << layout.d_b << " pairs " << layout.pattern.nnz()
      << " dropped_edges " << layout.dropped_edges << "\n";
  for (Index a = 0; a < layout.k; ++a) {
    for (Index b = 0; b < layout.k; ++b) {
      std::size_t cell = static_cast<std::size_t>(a * layout.k + b);
      out << "cell " << a << " " << b << " nnz " << grid.cell_nnz[cell] << " density "
          << grid.cell_density[cell]
          << (layout.cell_state[cell] == CellState::Transferred ? " transferred" : " untouched");
      if (!layout.cell_blocks[cell].empty()) {
        out << " blocks";
        for (const SubBlock& t : layout.cell_blocks[cell]) out << " (" << t.row << "," << t.col << ")";
      }
      out << "\n";
    }
  }
}

TunerState make_tuner_state(Real beta_g, Index delta) {
  if (beta_g < 0.0 || beta_g > 1.0) throw ConfigError("tuner: beta_g must lie in [0, 1]");
  if (delta < 1) throw ConfigError("tuner: delta must be >= 1");
  TunerState st;
  st.delta = delta;
  std::vector<Real> raw = {0.0, beta_g, 1.5 * beta_g, 5.0 * beta_g, 7.0 * beta_g, 10.0 * beta_g, 1.0};
  for (Real& v : raw) v = std::min(v, 1.0);
  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
  st.thresholds = std::move(raw);
  st.idx = static_cast<std::size_t>(
      std::lower_bound(st.thresholds.begin(), st.thresholds.end(), std::min(beta_g, 1.0)) -
      st.thresholds.begin());
  return st;
}

void tuner_update(TunerState& state, Real loss, Real epoch_time_s, Index epoch) {
  if (epoch_time_s <= 0.0) throw ConfigError("tuner_update: epoch_time must be positive");
  if (!state.has_loss) {
    state.avg_loss = loss;  // F_0 := first observed loss
    state.has_loss = true;
    state.ldr_history.emplace_back(epoch, 0.0);
    return;
  }
  if (!state.ldr_history.empty() && epoch != state.ldr_history.back().first + 1) {
    throw ConfigError("tuner_update: epochs must be consecutive");
  }
  const Real prev = state.avg_loss;
  state.avg_loss = 0.9 * prev + 0.1 * loss;
  const Real ldr = (state.avg_loss - prev) / epoch_time_s;
  state.ldr_history.emplace_back(epoch, ldr);

  const Index lag_pos = static_cast<Index>(state.ldr_history.size()) - 1 - state.delta;
  if (epoch >= state.delta && lag_pos >= 0) {
    const Real ldr_lag = state.ldr_history[static_cast<std::size_t>(lag_pos)].second;
    if (ldr >= ldr_lag) {
      state.idx = std::min(state.idx + 1, state.thresholds.size() - 1);
    } else if (state.idx > 0) {
      --state.idx;
    }
  }
}

Index select_k(std::int64_t l2_bytes, Index hidden_dim, Index i) {
  if (l2_bytes <= 0 || hidden_dim <= 0 || i <= 0) {
    throw ConfigError("select_k: all arguments must be positive");
  }
  Real raw = std::floor(std::sqrt(static_cast<Real>(l2_bytes) /
                                  (static_cast<Real>(i) * static_cast<Real>(hidden_dim))));
  if (raw < 1.0) throw ConfigError("select_k: cache budget yields k < 1");
  return static_cast<Index>(std::bit_floor(static_cast<std::uint64_t>(raw)));
}

Index select_db(const std::map<Index, Real>& profile) {
  if (profile.empty()) throw ConfigError("select_db: empty profile");
  std::vector<std::pair<Index, Real>> entries(profile.begin(), profile.end());
  Real best = -std::numeric_limits<Real>::infinity();
  for (const auto& [db, thr] : entries) best = std::max(best, thr);

  const Real median_pos = static_cast<Real>(entries.size() - 1) / 2.0;
  Index chosen = -1;
  Real chosen_dist = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].second != best) continue;
    Real dist = std::abs(static_cast<Real>(i) - median_pos);
    if (chosen == -1 || dist < chosen_dist ||
        (dist == chosen_dist && entries[i].first > chosen)) {
      chosen = entries[i].first;
      chosen_dist = dist;
    }
  }
  return chosen;
}

}  // namespace gte
