#include "gte/partition.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

namespace gte {

namespace {

constexpr int kMaxFmPasses = 10;
constexpr Real kBalanceTol = 0.05;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Undirected weighted working graph for the multilevel scheme. Edge weights
// count collapsed arcs; node weights count collapsed fine nodes.
struct UGraph {
  Index n = 0;
  std::vector<Index> off, adj;
  std::vector<std::int64_t> ew;
  std::vector<std::int64_t> nw;

  std::int64_t total_weight() const {
    return std::accumulate(nw.begin(), nw.end(), std::int64_t{0});
  }
};

UGraph ugraph_from(const Graph& g) {
  std::vector<std::pair<Index, Index>> und;
  und.reserve(static_cast<std::size_t>(g.nnz()) * 2);
  for (Index u = 0; u < g.num_nodes; ++u) {
    for (Index v : g.neighbors(u)) {
      if (u == v) continue;
      und.emplace_back(u, v);
      und.emplace_back(v, u);
    }
  }
  std::sort(und.begin(), und.end());

  UGraph ug;
  ug.n = g.num_nodes;
  ug.off.assign(static_cast<std::size_t>(g.num_nodes) + 1, 0);
  ug.nw.assign(static_cast<std::size_t>(g.num_nodes), 1);
  for (std::size_t i = 0; i < und.size();) {
    std::size_t j = i;
    while (j < und.size() && und[j] == und[i]) ++j;
    ug.adj.push_back(und[i].second);
    ug.ew.push_back(static_cast<std::int64_t>(j - i));
    ug.off[und[i].first + 1] = static_cast<Index>(ug.adj.size());
    i = j;
  }
  for (Index u = 0; u < ug.n; ++u) ug.off[u + 1] = std::max(ug.off[u + 1], ug.off[u]);
  return ug;
}

struct Coarsening {
  UGraph coarse;
  std::vector<Index> fine_to_coarse;
};

Coarsening contract(const UGraph& ug, const std::vector<Index>& partner) {
  Coarsening c;
  c.fine_to_coarse.assign(static_cast<std::size_t>(ug.n), -1);
  Index next = 0;
  for (Index u = 0; u < ug.n; ++u) {
    if (c.fine_to_coarse[u] != -1) continue;
    c.fine_to_coarse[u] = next;
    if (partner[u] != u) c.fine_to_coarse[partner[u]] = next;
    ++next;
  }
  c.coarse.n = next;
  c.coarse.nw.assign(static_cast<std::size_t>(next), 0);
  for (Index u = 0; u < ug.n; ++u) c.coarse.nw[c.fine_to_coarse[u]] += ug.nw[u];

  std::vector<std::pair<std::pair<Index, Index>, std::int64_t>> edges;
  for (Index u = 0; u < ug.n; ++u) {
    Index cu = c.fine_to_coarse[u];
    for (Index e = ug.off[u]; e < ug.off[u + 1]; ++e) {
      Index cv = c.fine_to_coarse[ug.adj[e]];
      if (cu == cv) continue;
      edges.push_back({{cu, cv}, ug.ew[e]});
    }
  }
  std::sort(edges.begin(), edges.end());
  c.coarse.off.assign(static_cast<std::size_t>(next) + 1, 0);
  for (std::size_t i = 0; i < edges.size();) {
    std::size_t j = i;
    std::int64_t w = 0;
    while (j < edges.size() && edges[j].first == edges[i].first) w += edges[j++].second;
    c.coarse.adj.push_back(edges[i].first.second);
    c.coarse.ew.push_back(w);
    c.coarse.off[edges[i].first.first + 1] = static_cast<Index>(c.coarse.adj.size());
    i = j;
  }
  for (Index u = 0; u < next; ++u) c.coarse.off[u + 1] = std::max(c.coarse.off[u + 1], c.coarse.off[u]);
  return c;
}

std::vector<Index> heavy_edge_matching(const UGraph& ug, std::mt19937_64& rng) {
  std::vector<Index> order(static_cast<std::size_t>(ug.n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Index> partner(static_cast<std::size_t>(ug.n));
  std::iota(partner.begin(), partner.end(), Index{0});
  std::vector<bool> matched(static_cast<std::size_t>(ug.n), false);
  for (Index u : order) {
    if (matched[u]) continue;
    Index best = -1;
    std::int64_t best_w = -1;
    for (Index e = ug.off[u]; e < ug.off[u + 1]; ++e) {
      Index v = ug.adj[e];
      if (matched[v] || v == u) continue;
      if (ug.ew[e] > best_w || (ug.ew[e] == best_w && v < best)) {
        best_w = ug.ew[e];
        best = v;
      }
    }
    if (best != -1) {
      matched[u] = matched[best] = true;
      partner[u] = best;
      partner[best] = u;
    }
  }
  return partner;
}

// BFS over the component of src; returns the farthest node (max depth,
// smallest id among ties).
Index farthest_from(const UGraph& ug, Index src, std::vector<int>& dist) {
  std::fill(dist.begin(), dist.end(), -1);
  std::vector<Index> frontier{src}, next;
  dist[src] = 0;
  Index far = src;
  int far_d = 0;
  while (!frontier.empty()) {
    next.clear();
    for (Index u : frontier) {
      for (Index e = ug.off[u]; e < ug.off[u + 1]; ++e) {
        Index v = ug.adj[e];
        if (dist[v] == -1) {
          dist[v] = dist[u] + 1;
          next.push_back(v);
          if (dist[v] > far_d || (dist[v] == far_d && v < far)) {
            far_d = dist[v];
            far = v;
          }
        }
      }
    }
    frontier.swap(next);
  }
  return far;
}

std::int64_t cut_weight(const UGraph& ug, const std::vector<int>& side) {
  std::int64_t cut = 0;
  for (Index u = 0; u < ug.n; ++u) {
    for (Index e = ug.off[u]; e < ug.off[u + 1]; ++e) {
      if (side[u] != side[ug.adj[e]]) cut += ug.ew[e];
    }
  }
  return cut / 2;
}

std::int64_t balance_allowance(const UGraph& ug) {
  std::int64_t max_nw = ug.n == 0 ? 1 : *std::max_element(ug.nw.begin(), ug.nw.end());
  // 5% tolerance per side, floored so lumpy coarse nodes stay movable.
  return std::max<std::int64_t>(
      static_cast<std::int64_t>(2 * kBalanceTol * static_cast<Real>(ug.total_weight())),
      2 * max_nw);
}

// Classic FM passes with best-prefix rollback; keeps |w0 - w1| <= allow.
void fm_refine(const UGraph& ug, std::vector<int>& side, std::int64_t allow) {
  const Index n = ug.n;
  std::int64_t side_w[2] = {0, 0};
  for (Index v = 0; v < n; ++v) side_w[side[v]] += ug.nw[v];

  std::vector<std::int64_t> gain(static_cast<std::size_t>(n));
  std::vector<bool> locked(static_cast<std::size_t>(n));
  std::vector<Index> moves;
  moves.reserve(static_cast<std::size_t>(n));
  for (int pass = 0; pass < kMaxFmPasses; ++pass) {
    for (Index v = 0; v < n; ++v) {
      std::int64_t g = 0;
      for (Index e = ug.off[v]; e < ug.off[v + 1]; ++e) {
        g += (side[ug.adj[e]] != side[v]) ? ug.ew[e] : -ug.ew[e];
      }
      gain[v] = g;
      locked[v] = false;
    }
    moves.clear();
    std::int64_t cum = 0, best_cum = 0;
    std::size_t best_prefix = 0;
    while (true) {
      Index best = -1;
      for (Index v = 0; v < n; ++v) {
        if (locked[v]) continue;
        int from = side[v];
        std::int64_t imb = std::abs((side_w[from] - ug.nw[v]) - (side_w[1 - from] + ug.nw[v]));
        if (imb > allow) continue;
        if (best == -1 || gain[v] > gain[best] || (gain[v] == gain[best] && v < best)) best = v;
      }
      if (best == -1) break;
      int from = side[best];
      side[best] = 1 - from;
      side_w[from] -= ug.nw[best];
      side_w[1 - from] += ug.nw[best];
      locked[best] = true;
      cum += gain[best];
      moves.push_back(best);
      for (Index e = ug.off[best]; e < ug.off[best + 1]; ++e) {
        Index nb = ug.adj[e];
        if (locked[nb]) continue;
        // Edge toward best's new side turned internal, away turned cut.
        gain[nb] += (side[nb] == side[best]) ? -2 * ug.ew[e] : 2 * ug.ew[e];
      }
      if (cum > best_cum) {
        best_cum = cum;
        best_prefix = moves.size();
      }
    }
    for (std::size_t i = moves.size(); i > best_prefix; --i) {
      Index v = moves[i - 1];
      int from = side[v];
      side[v] = 1 - from;
      side_w[from] -= ug.nw[v];
      side_w[1 - from] += ug.nw[v];
    }
    if (best_cum <= 0) break;
  }
}

// Greedy region growth from a seed toward half the total node weight.
std::vector<int> grow_region(const UGraph& ug, Index seed) {
  const Index n = ug.n;
  std::vector<int> side(static_cast<std::size_t>(n), 1);
  const std::int64_t target = ug.total_weight() / 2;
  std::vector<std::int64_t> conn(static_cast<std::size_t>(n), 0);
  std::int64_t w0 = 0;
  Index assigned = 0;
  Index cur = seed;
  while (true) {
    side[cur] = 0;
    w0 += ug.nw[cur];
    ++assigned;
    for (Index e = ug.off[cur]; e < ug.off[cur + 1]; ++e) {
      if (side[ug.adj[e]] == 1) conn[ug.adj[e]] += ug.ew[e];
    }
    if (w0 >= target || assigned == n) break;
    Index best = -1;
    std::int64_t best_c = -1;
    for (Index v = 0; v < n; ++v) {
      if (side[v] == 0) continue;
      if (conn[v] > best_c || (conn[v] == best_c && (best == -1 || v < best))) {
        best_c = conn[v];
        best = v;
      }
    }
    if (best == -1) break;  // unreachable: every unassigned node has conn >= 0
    cur = best;
  }
  return side;
}

// Moves of least damage from the heavy side until sizes differ by <= 1 unit
// of weight; aligns parts with the fixed near-equal grid ranges.
void exact_rebalance(const UGraph& ug, std::vector<int>& side) {
  std::int64_t side_w[2] = {0, 0};
  for (Index v = 0; v < ug.n; ++v) side_w[side[v]] += ug.nw[v];
  while (std::abs(side_w[0] - side_w[1]) > 1) {
    int from = side_w[0] > side_w[1] ? 0 : 1;
    Index best = -1;
    std::int64_t best_gain = 0;
    for (Index v = 0; v < ug.n; ++v) {
      if (side[v] != from) continue;
      if (2 * ug.nw[v] > side_w[from] - side_w[1 - from]) continue;  // would overshoot
      std::int64_t g = 0;
      for (Index e = ug.off[v]; e < ug.off[v + 1]; ++e) {
        g += (side[ug.adj[e]] != from) ? ug.ew[e] : -ug.ew[e];
      }
      if (best == -1 || g > best_gain || (g == best_gain && v < best)) {
        best = v;
        best_gain = g;
      }
    }
    if (best == -1) break;
    side[best] = 1 - from;
    side_w[from] -= ug.nw[best];
    side_w[1 - from] += ug.nw[best];
  }
}

// One multilevel bisection: coarsen to <= 64 nodes, grow + FM at the
// coarsest level (few seeded restarts, best cut kept), then project back
// level by level with FM refinement, and balance exactly at the finest.
std::vector<int> bisect(const UGraph& ug, std::mt19937_64& rng) {
  if (ug.n == 1) return {0};

  std::vector<UGraph> levels{ug};
  std::vector<std::vector<Index>> maps;
  while (levels.back().n > 64) {
    std::vector<Index> partner = heavy_edge_matching(levels.back(), rng);
    Coarsening c = contract(levels.back(), partner);
    if (static_cast<Real>(c.coarse.n) > 0.95 * static_cast<Real>(levels.back().n)) break;
    maps.push_back(std::move(c.fine_to_coarse));
    levels.push_back(std::move(c.coarse));
  }

  const UGraph& coarsest = levels.back();
  std::vector<int> side;
  std::int64_t best_cut = -1;
  std::vector<int> dist(static_cast<std::size_t>(coarsest.n));
  std::uniform_int_distribution<Index> pick(0, coarsest.n - 1);
  const int restarts = 4;
  for (int r = 0; r < restarts; ++r) {
    Index u1 = farthest_from(coarsest, pick(rng), dist);
    Index seed = farthest_from(coarsest, u1, dist);
    std::vector<int> cand = grow_region(coarsest, r == 0 ? seed : pick(rng));
    fm_refine(coarsest, cand, balance_allowance(coarsest));
    std::int64_t cut = cut_weight(coarsest, cand);
    if (best_cut < 0 || cut < best_cut) {
      best_cut = cut;
      side = std::move(cand);
    }
  }

  for (std::size_t level = maps.size(); level-- > 0;) {
    std::vector<int> fine(maps[level].size());
    for (std::size_t v = 0; v < maps[level].size(); ++v) fine[v] = side[maps[level][v]];
    side = std::move(fine);
    fm_refine(levels[level], side, balance_allowance(levels[level]));
  }
  exact_rebalance(ug, side);
  fm_refine(ug, side, 1);  // polish at fixed balance
  return side;
}

void recursive_bisect(const UGraph& ug, const std::vector<Index>& ids, Index k,
                      std::uint64_t seed, Index part_base, std::vector<Index>& part_of) {
  if (k == 1 || ug.n == 0) {
    for (Index v : ids) part_of[v] = part_base;
    return;
  }
  std::mt19937_64 rng(splitmix64(seed));
  std::vector<int> side = bisect(ug, rng);

  // Split into the two induced sub-graphs, cut edges dropped.
  std::vector<Index> sub_id(static_cast<std::size_t>(ug.n), -1);
  std::vector<Index> ids_sub[2];
  UGraph sub[2];
  for (Index v = 0; v < ug.n; ++v) {
    int s = side[v];
    sub_id[v] = static_cast<Index>(ids_sub[s].size());
    ids_sub[s].push_back(ids[v]);
    sub[s].nw.push_back(ug.nw[v]);
  }
  for (int s = 0; s < 2; ++s) {
    sub[s].n = static_cast<Index>(ids_sub[s].size());
    sub[s].off.assign(static_cast<std::size_t>(sub[s].n) + 1, 0);
  }
  for (Index v = 0; v < ug.n; ++v) {
    int s = side[v];
    for (Index e = ug.off[v]; e < ug.off[v + 1]; ++e) {
      if (side[ug.adj[e]] != s) continue;
      sub[s].adj.push_back(sub_id[ug.adj[e]]);
      sub[s].ew.push_back(ug.ew[e]);
    }
    sub[s].off[sub_id[v] + 1] = static_cast<Index>(sub[s].adj.size());
  }
  for (int s = 0; s < 2; ++s) {
    for (Index u = 0; u < sub[s].n; ++u) sub[s].off[u + 1] = std::max(sub[s].off[u + 1], sub[s].off[u]);
  }
  recursive_bisect(sub[0], ids_sub[0], k / 2, splitmix64(seed ^ 0x517cc1b727220a95ULL), part_base,
                   part_of);
  recursive_bisect(sub[1], ids_sub[1], k / 2, splitmix64(seed ^ 0x2545f4914f6cdd1dULL),
                   part_base + k / 2, part_of);
}

}  // namespace

Permutation Permutation::identity(Index n) {
  Permutation p;
  p.forward.resize(static_cast<std::size_t>(n));
  p.inverse.resize(static_cast<std::size_t>(n));
  std::iota(p.forward.begin(), p.forward.end(), Index{0});
  std::iota(p.inverse.begin(), p.inverse.end(), Index{0});
  return p;
}

bool Permutation::valid() const {
  if (forward.size() != inverse.size()) return false;
  for (Index i = 0; i < size(); ++i) {
    Index f = forward[static_cast<std::size_t>(i)];
    if (f < 0 || f >= size() || inverse[static_cast<std::size_t>(f)] != i) return false;
  }
  return true;
}

Permutation reorder(const Graph& g, Index k, std::uint64_t seed) {
  if (k < 1 || (k & (k - 1)) != 0) throw ConfigError("reorder: k must be a power of two >= 1");
  if (k > g.num_nodes) throw ConfigError("reorder: k exceeds node count");

  UGraph ug = ugraph_from(g);
  std::vector<Index> ids(static_cast<std::size_t>(ug.n));
  std::iota(ids.begin(), ids.end(), Index{0});
  std::vector<Index> part(static_cast<std::size_t>(g.num_nodes), 0);
  recursive_bisect(ug, ids, k, splitmix64(seed ^ 0xda3e39cb94b95bdbULL), 0, part);

  std::vector<Index> order(static_cast<std::size_t>(g.num_nodes));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return part[a] < part[b]; });

  Permutation p;
  p.inverse = std::move(order);
  p.forward.resize(static_cast<std::size_t>(g.num_nodes));
  for (Index pos = 0; pos < g.num_nodes; ++pos) p.forward[p.inverse[pos]] = pos;
  return p;
}

Graph permute_graph(const Graph& g, const Permutation& p) {
  if (p.size() != g.num_nodes || !p.valid()) throw ConfigError("permute_graph: bad permutation");
  std::vector<std::pair<Index, Index>> edges;
  edges.reserve(static_cast<std::size_t>(g.nnz()));
  for (Index u = 0; u < g.num_nodes; ++u) {
    for (Index v : g.neighbors(u)) edges.emplace_back(p.forward[u], p.forward[v]);
  }
  Graph out = graph_from_edges(g.num_nodes, std::move(edges));
  if (!g.features.empty()) {
    out.features = Matrix(g.num_nodes, g.features.cols());
    for (Index u = 0; u < g.num_nodes; ++u) {
      auto src = g.features.row(u);
      std::copy(src.begin(), src.end(), out.features.row(p.forward[u]).begin());
    }
  }
  if (!g.labels.empty()) {
    out.labels.resize(static_cast<std::size_t>(g.num_nodes));
    for (Index u = 0; u < g.num_nodes; ++u) out.labels[p.forward[u]] = g.labels[u];
  }
  out.graph_label = g.graph_label;
  return out;
}

void save_permutation(std::ostream& out, const Permutation& p) {
  for (Index old = 0; old < p.size(); ++old) {
    out << old << " " << p.forward[static_cast<std::size_t>(old)] << "\n";
  }
}

Permutation load_permutation(std::istream& in) {
  std::vector<std::pair<Index, Index>> pairs;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::istringstream ls(line);
    Index old = -1, pos = -1;
    if (!(ls >> old >> pos)) {
      throw DataError("permutation: parse error at line " + std::to_string(line_no));
    }
    pairs.emplace_back(old, pos);
  }
  Permutation p;
  p.forward.assign(pairs.size(), -1);
  p.inverse.assign(pairs.size(), -1);
  for (const auto& [old, pos] : pairs) {
    if (old < 0 || old >= static_cast<Index>(pairs.size()) || pos < 0 ||
        pos >= static_cast<Index>(pairs.size()) || p.forward[old] != -1) {
      throw DataError("permutation: invalid pair " + std::to_string(old) + " " +
                      std::to_string(pos));
    }
    p.forward[old] = pos;
    p.inverse[pos] = old;
  }
  if (!p.valid()) throw DataError("permutation: not a bijection");
  return p;
}

std::vector<Index> cluster_boundaries(Index n, Index k) {
  std::vector<Index> b(static_cast<std::size_t>(k) + 1, 0);
  Index base = n / k, rem = n % k;
  for (Index i = 0; i < k; ++i) b[i + 1] = b[i] + base + (i < rem ? 1 : 0);
  return b;
}

Index ClusterGrid::cluster_of(Index pos) const {
  Index n = boundaries.back();
  Index base = n / k, rem = n % k;
  Index cut = rem * (base + 1);
  if (pos < cut) return pos / (base + 1);
  return rem + (pos - cut) / base;
}

std::int64_t ClusterGrid::total_nnz() const {
  return std::accumulate(cell_nnz.begin(), cell_nnz.end(), std::int64_t{0});
}

ClusterGrid build_cluster_grid(const Graph& g, const Permutation& p, Index k) {
  if (k < 1 || k > g.num_nodes) throw ConfigError("build_cluster_grid: invalid k");
  if (p.size() != g.num_nodes || !p.valid()) {
    throw ConfigError("build_cluster_grid: permutation does not match graph");
  }
  ClusterGrid grid;
  grid.k = k;
  grid.boundaries = cluster_boundaries(g.num_nodes, k);
  grid.cell_nnz.assign(static_cast<std::size_t>(k * k), 0);
  grid.cell_density.assign(static_cast<std::size_t>(k * k), 0.0);
  for (Index u = 0; u < g.num_nodes; ++u) {
    Index a = grid.cluster_of(p.forward[u]);
    for (Index v : g.neighbors(u)) {
      Index b = grid.cluster_of(p.forward[v]);
      grid.cell_nnz[static_cast<std::size_t>(a * k + b)]++;
    }
  }
  for (Index a = 0; a < k; ++a) {
    for (Index b = 0; b < k; ++b) {
      Real area = static_cast<Real>(grid.range_size(a)) * static_cast<Real>(grid.range_size(b));
      grid.cell_density[static_cast<std::size_t>(a * k + b)] =
          static_cast<Real>(grid.cell_nnz[static_cast<std::size_t>(a * k + b)]) / area;
    }
  }
  return grid;
}

Real diagonal_edge_fraction(const ClusterGrid& grid) {
  std::int64_t total = grid.total_nnz();
  if (total == 0) throw DataError("diagonal_edge_fraction: empty graph");
  std::int64_t diag = 0;
  for (Index a = 0; a < grid.k; ++a) diag += grid.cell_nnz[static_cast<std::size_t>(a * grid.k + a)];
  return static_cast<Real>(diag) / static_cast<Real>(total);
}

}  // namespace gte
