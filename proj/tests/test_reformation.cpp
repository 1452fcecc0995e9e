#include <set>

#include "doctest.h"
#include "gte/model.hpp"
#include "gte/reformation.hpp"
#include "oracles.hpp"

using namespace gte;

TEST_SUITE_BEGIN("reformation");

namespace {

// Independent reference for the tuner: the two update formulas, re-coded.
struct TunerRef {
  Real f = 0;
  bool init = false;
  std::vector<Real> ldr;
  std::size_t idx;
  std::vector<Real> set;
  Index delta;

  TunerRef(const std::vector<Real>& thresholds, std::size_t start, Index d)
      : idx(start), set(thresholds), delta(d) {}

  void step(Real loss, Real et, Index epoch) {
    if (!init) {
      f = loss;
      init = true;
      ldr.push_back(0.0);
      return;
    }
    Real prev = f;
    f = 0.9 * prev + 0.1 * loss;
    ldr.push_back((f - prev) / et);
    if (epoch >= delta && static_cast<Index>(ldr.size()) - 1 - delta >= 0) {
      if (ldr.back() >= ldr[ldr.size() - 1 - delta]) {
        idx = std::min(idx + 1, set.size() - 1);
      } else if (idx > 0) {
        --idx;
      }
    }
  }
};

std::int64_t coverage_of(std::span<const std::pair<Index, Index>> edges,
                         const std::vector<SubBlock>& tiles, Index d_b) {
  std::int64_t covered = 0;
  for (const auto& [r, c] : edges) {
    for (const SubBlock& t : tiles) {
      if (r >= t.row && r < t.row + d_b && c >= t.col && c < t.col + d_b) {
        ++covered;
        break;
      }
    }
  }
  return covered;
}

// Exhaustive optimum over all placements of up to `count` non-overlapping
// tiles. Only viable for tiny cells.
std::int64_t best_coverage(std::span<const std::pair<Index, Index>> edges, Index rows, Index cols,
                           Index d_b, Index count) {
  std::vector<SubBlock> origins;
  for (Index r = 0; r + d_b <= rows; ++r) {
    for (Index c = 0; c + d_b <= cols; ++c) origins.push_back({r, c});
  }
  std::int64_t best = 0;
  std::vector<SubBlock> chosen;
  std::function<void(std::size_t, Index)> rec = [&](std::size_t from, Index left) {
    best = std::max(best, coverage_of(edges, chosen, d_b));
    if (left == 0) return;
    for (std::size_t i = from; i < origins.size(); ++i) {
      bool ok = true;
      for (const SubBlock& t : chosen) {
        if (std::abs(origins[i].row - t.row) < d_b && std::abs(origins[i].col - t.col) < d_b) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      chosen.push_back(origins[i]);
      rec(i + 1, left - 1);
      chosen.pop_back();
    }
  };
  rec(0, count);
  return best;
}

}  // namespace

TEST_CASE("pack_subblocks single tile covers the corner cluster") {
  std::vector<std::pair<Index, Index>> edges = {{0, 0}, {0, 1}, {1, 0}};
  auto tiles = pack_subblocks(edges, 4, 4, 2);
  // ceil(3/4) = 1 tile; exhaustive over all 9 origins says (0,0) covers all 3.
  REQUIRE(tiles.size() == 1);
  CHECK(tiles[0] == SubBlock{0, 0});
  CHECK(coverage_of(edges, tiles, 2) == 3);
  CHECK(best_coverage(edges, 4, 4, 2, 1) == 3);
}

TEST_CASE("pack_subblocks tiles a full cell exactly") {
  std::vector<std::pair<Index, Index>> edges;
  for (Index r = 0; r < 4; ++r) {
    for (Index c = 0; c < 4; ++c) edges.emplace_back(r, c);
  }
  auto tiles = pack_subblocks(edges, 4, 4, 2);
  CHECK(tiles.size() == 4);  // ceil(16/4)
  CHECK(coverage_of(edges, tiles, 2) == 16);
}

TEST_CASE("pack_subblocks validates d_b") {
  std::vector<std::pair<Index, Index>> edges = {{0, 0}};
  CHECK_THROWS_AS(pack_subblocks(edges, 2, 2, 3), ConfigError);
  CHECK(pack_subblocks({}, 4, 4, 2).empty());
}

TEST_CASE("pack_subblocks b formula and non-overlap") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Index rows = 6, cols = 6, d_b = 2;
    std::set<std::pair<Index, Index>> es;
    std::uniform_int_distribution<Index> pick(0, 5);
    Index want = 1 + static_cast<Index>(seed % 12);
    while (static_cast<Index>(es.size()) < want) es.insert({pick(rng), pick(rng)});
    std::vector<std::pair<Index, Index>> edges(es.begin(), es.end());
    auto tiles = pack_subblocks(edges, rows, cols, d_b);
    std::int64_t expect = (static_cast<std::int64_t>(edges.size()) + 3) / 4;
    CHECK(static_cast<std::int64_t>(tiles.size()) == expect);
    for (std::size_t a = 0; a < tiles.size(); ++a) {
      for (std::size_t b = a + 1; b < tiles.size(); ++b) {
        bool overlap = std::abs(tiles[a].row - tiles[b].row) < d_b &&
                       std::abs(tiles[a].col - tiles[b].col) < d_b;
        CHECK_FALSE(overlap);
      }
    }
  }
}

TEST_CASE("greedy packing is within half of the exhaustive optimum") {
  // All cells with sides <= 6 are covered by randomized nnz <= 8 fixtures.
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::mt19937_64 rng(900 + seed);
    Index rows = 3 + static_cast<Index>(seed % 4);
    Index cols = 3 + static_cast<Index>((seed / 4) % 4);
    Index d_b = 2;
    std::set<std::pair<Index, Index>> es;
    std::uniform_int_distribution<Index> pr(0, rows - 1), pc(0, cols - 1);
    Index want = 1 + static_cast<Index>(seed % 8);
    for (int tries = 0; tries < 100 && static_cast<Index>(es.size()) < want; ++tries) {
      es.insert({pr(rng), pc(rng)});
    }
    std::vector<std::pair<Index, Index>> edges(es.begin(), es.end());
    auto tiles = pack_subblocks(edges, rows, cols, d_b);
    Index b = static_cast<Index>((edges.size() + 3) / 4);
    std::int64_t got = coverage_of(edges, tiles, d_b);
    std::int64_t opt = best_coverage(edges, rows, cols, d_b, b);
    std::int64_t single = best_coverage(edges, rows, cols, d_b, 1);
    CHECK(got * 2 >= opt);
    CHECK(got >= single);  // greedy's first tile is the best single tile
  }
}

TEST_CASE("build_layout thresholds") {
  Graph g = add_self_loops(generate_sbm(16, 2, 0.9, 0.05, 3, 0.0));
  Permutation id = Permutation::identity(16);
  ClusterGrid grid = build_cluster_grid(g, id, 4);
  Real bg = density(g);

  // beta_thre = 0: nothing transfers, pattern reproduces the graph.
  ClusterSparseLayout zero = build_layout(grid, g, TransferStrategy::Elastic, 0.0, bg, 2);
  CHECK(zero.transferred_cells() == 0);
  CHECK(zero.pattern.cols == g.col_indices);
  CHECK(zero.dropped_edges == 0);

  // beta_thre = 1: every non-full cell transfers.
  ClusterSparseLayout one = build_layout(grid, g, TransferStrategy::Elastic, 1.0, bg, 2);
  Index non_full = 0;
  for (Index cell = 0; cell < 16; ++cell) {
    if (grid.cell_density[cell] < 1.0) ++non_full;
  }
  CHECK(one.transferred_cells() == non_full);

  // Indolent never touches a full cell.
  ClusterSparseLayout ind = build_layout(grid, g, TransferStrategy::Indolent, 0.7, bg, 2);
  for (Index cell = 0; cell < 16; ++cell) {
    if (grid.cell_density[cell] >= 1.0) {
      CHECK(ind.cell_state[cell] == CellState::Untouched);
    }
    if (grid.cell_density[cell] >= bg) {
      CHECK(ind.cell_state[cell] == CellState::Untouched);
    }
  }
}

TEST_CASE("transferred cells satisfy the pair-count bound") {
  Graph g = add_self_loops(generate_sbm(32, 4, 0.6, 0.05, 7, 0.0));
  Permutation p = reorder(g, 4, 1);
  ClusterGrid grid = build_cluster_grid(g, p, 4);
  Graph gp = permute_graph(g, p);
  ClusterSparseLayout layout = build_layout(grid, gp, TransferStrategy::Elastic, 0.5,
                                            density(g), 2);
  for (Index a = 0; a < 4; ++a) {
    for (Index b = 0; b < 4; ++b) {
      Index cell = a * 4 + b;
      if (layout.cell_state[cell] != CellState::Transferred) continue;
      std::int64_t nnz_cell = grid.cell_nnz[cell];
      if (nnz_cell == 0) {
        CHECK(layout.cell_blocks[cell].empty());
        continue;
      }
      std::int64_t b_count = static_cast<std::int64_t>(layout.cell_blocks[cell].size());
      CHECK(b_count == (nnz_cell + 3) / 4);
      CHECK(b_count * 4 >= nnz_cell);
    }
  }
  // Cost sits between the edge pattern and dense: nnz <= pairs <= S^2.
  CHECK(layout.pattern.nnz() >= gp.nnz());
  CHECK(layout.pattern.nnz() <= 32 * 32);
}

TEST_CASE("raising beta_thre never transfers fewer cells") {
  Graph g = add_self_loops(generate_sbm(24, 3, 0.5, 0.1, 11, 0.0));
  Permutation id = Permutation::identity(24);
  ClusterGrid grid = build_cluster_grid(g, id, 4);
  Real bg = density(g);
  Index prev = -1;
  for (Real thre : {0.0, 0.2, 0.5, 0.8, 1.0}) {
    ClusterSparseLayout layout = build_layout(grid, g, TransferStrategy::Elastic, thre, bg, 2);
    CHECK(layout.transferred_cells() >= prev);
    prev = layout.transferred_cells();
  }
}

TEST_CASE("cluster attention: zero transfers equals edge sparse") {
  Graph g = add_self_loops(generate_sbm(16, 2, 0.7, 0.1, 5, 0.0));
  Permutation id = Permutation::identity(16);
  ClusterGrid grid = build_cluster_grid(g, id, 4);
  ClusterSparseLayout layout = build_layout(grid, g, TransferStrategy::Elastic, 0.0, density(g), 2);
  std::mt19937_64 rng(2);
  Matrix q = Matrix::randn(16, 4, 1.0, rng);
  Matrix k = Matrix::randn(16, 4, 1.0, rng);
  Matrix v = Matrix::randn(16, 4, 1.0, rng);
  auto cluster = cluster_sparse_attention(q, k, v, layout);
  auto edge = edge_sparse_attention(q, k, v, g);
  CHECK(max_abs_diff(cluster.output, edge.output) == 0.0);
  CHECK(cluster.macs.score_macs == edge.macs.score_macs);
}

TEST_CASE("cluster attention with full transfer matches dense per cluster") {
  // One cluster (k=1), every pair covered by tiles: equals dense attention.
  std::vector<std::pair<Index, Index>> all;
  for (Index i = 0; i < 8; ++i) {
    for (Index j = 0; j < 8; ++j) all.emplace_back(i, j);
  }
  Graph g = graph_from_edges(8, all);
  // Remove one edge so the single cell is below threshold 1.
  all.pop_back();
  Graph g2 = graph_from_edges(8, all);
  ClusterGrid grid = build_cluster_grid(g2, Permutation::identity(8), 1);
  ClusterSparseLayout layout = build_layout(grid, g2, TransferStrategy::Elastic, 1.0,
                                            density(g2), 4);
  REQUIRE(layout.transferred_cells() == 1);
  // ceil(63/16) = 4 tiles of 4x4 tile the whole 8x8 cell.
  REQUIRE(layout.pattern.nnz() == 64);
  std::mt19937_64 rng(4);
  Matrix q = Matrix::randn(8, 4, 1.0, rng);
  Matrix k = Matrix::randn(8, 4, 1.0, rng);
  Matrix v = Matrix::randn(8, 4, 1.0, rng);
  auto cluster = cluster_sparse_attention(q, k, v, layout);
  auto dense = dense_attention(q, k, v);
  CHECK(max_abs_diff(cluster.output, dense.output) <= 1e-9);
  CHECK(layout.dropped_edges == 0);
}

TEST_CASE("single sub-block pattern readback") {
  // 4x4 single cell with edges in rows {0,1} x cols {2,3} only.
  std::vector<std::pair<Index, Index>> edges = {{0, 2}, {0, 3}, {1, 2}, {1, 3}};
  Graph g = graph_from_edges(4, edges);
  ClusterGrid grid = build_cluster_grid(g, Permutation::identity(4), 1);
  ClusterSparseLayout layout = build_layout(grid, g, TransferStrategy::Elastic, 1.0,
                                            density(g), 2);
  REQUIRE(layout.cell_blocks[0].size() == 1);
  CHECK(layout.cell_blocks[0][0] == SubBlock{0, 2});
  CHECK(layout.pattern.row_cols(0).size() == 2);
  CHECK(layout.pattern.row_cols(0)[0] == 2);
  CHECK(layout.pattern.row_cols(2).size() == 0);
  CHECK(layout.dropped_edges == 0);

  Matrix q(4, 2), k(4, 2), v(4, 2);
  CHECK_THROWS_AS(cluster_sparse_attention(Matrix(5, 2), Matrix(5, 2), Matrix(5, 2), layout),
                  ConfigError);
}

TEST_CASE("tuner matches the reference simulation exactly") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Real> lu(0.1, 2.0), tu(0.5, 2.0);
    Real beta_g = 0.01 + 0.01 * static_cast<Real>(seed);
    Index delta = seed % 2 == 0 ? 3 : 10;
    TunerState st = make_tuner_state(beta_g, delta);
    TunerRef ref(st.thresholds, st.idx, delta);
    Real walk = lu(rng);
    for (Index epoch = 0; epoch < 60; ++epoch) {
      walk = std::max(0.01, walk + (lu(rng) - 1.0) * 0.2);
      Real et = tu(rng);
      tuner_update(st, walk, et, epoch);
      ref.step(walk, et, epoch);
      REQUIRE(st.idx == ref.idx);
      REQUIRE(st.avg_loss == doctest::Approx(ref.f).epsilon(1e-12));
    }
  }
}

TEST_CASE("tuner basic stepping") {
  TunerState st = make_tuner_state(0.05, 1);
  tuner_update(st, 1.0, 1.0, 0);
  CHECK(st.avg_loss == 1.0);
  std::size_t idx0 = st.idx;
  CHECK(st.beta_thre() == doctest::Approx(0.05));

  // Steadily shrinking descent rate: LDR_t >= LDR_{t-1} -> step up.
  tuner_update(st, 0.8, 1.0, 1);   // LDR_1 = -0.02; epoch 1 >= delta, vs LDR_0 = 0 -> down (clamped at 0? no: idx0 could be > 0)
  tuner_update(st, 0.8, 1.0, 2);   // diff shrinks by 0.9 each epoch -> up
  CHECK(st.idx >= idx0 - 1);

  CHECK_THROWS_AS(tuner_update(st, 0.5, 0.0, 3), ConfigError);
  CHECK_THROWS_AS(tuner_update(st, 0.5, -1.0, 3), ConfigError);
}

TEST_CASE("tuner clamps at the ends of the set") {
  TunerState st = make_tuner_state(0.1, 1);
  tuner_update(st, 1.0, 1.0, 0);
  // Constant loss: diffs shrink geometrically, LDR_t >= LDR_{t-delta} always.
  for (Index e = 1; e < 30; ++e) tuner_update(st, 1.0, 1.0, e);
  CHECK(st.idx == st.thresholds.size() - 1);
  CHECK(st.beta_thre() == 1.0);

  // Accelerating descent: LDR keeps dropping -> idx walks to 0 and stays.
  TunerState down = make_tuner_state(0.1, 1);
  Real loss = 10.0;
  tuner_update(down, loss, 1.0, 0);
  for (Index e = 1; e < 30; ++e) {
    loss -= 0.03 * static_cast<Real>(e);
    tuner_update(down, loss, 1.0, e);
  }
  CHECK(down.idx == 0);
  CHECK(down.beta_thre() == 0.0);
}

TEST_CASE("threshold set construction") {
  TunerState st = make_tuner_state(0.2, 10);
  // 5*0.2 hits 1 exactly; 7*0.2 and 10*0.2 clamp to 1; all collapse.
  CHECK(st.thresholds == std::vector<Real>{0.0, 0.2, 1.5 * 0.2, 1.0});
  CHECK(st.beta_thre() == doctest::Approx(0.2));

  TunerState tiny = make_tuner_state(0.0, 10);
  CHECK(tiny.thresholds == std::vector<Real>{0.0, 1.0});
  CHECK(tiny.idx == 0);
}

TEST_CASE("select_k arithmetic") {
  CHECK(select_k(6291456, 64, 1536) == 8);  // 6291456/(1536*64) = 64, sqrt = 8
  CHECK(select_k(64, 64, 1) == 1);
  CHECK(select_k(6291456, 64, 100) == 16);  // raw 31 -> power of two 16
  CHECK_THROWS_AS(select_k(16, 64, 10), ConfigError);
  CHECK_THROWS_AS(select_k(0, 64, 1), ConfigError);
}

TEST_CASE("select_db picks the throughput argmax with median ties") {
  std::map<Index, Real> profile = {{2, 1.0}, {8, 2.0}, {16, 2.4}, {32, 2.1}, {128, 1.2}};
  CHECK(select_db(profile) == 16);
  CHECK(select_db({{16, 1.0}}) == 16);
  std::map<Index, Real> tie = {{2, 1.0}, {8, 2.0}, {16, 2.0}, {32, 1.5}};
  CHECK(select_db(tie) == 16);
  CHECK_THROWS_AS(select_db({}), ConfigError);
}

TEST_SUITE_END();
