#include "gte/interleave.hpp"

#include <algorithm>
#include <vector>

namespace gte {

namespace {

// BFS over undirected structure; fills dist (-1 unreached), returns the
// farthest node (smallest id among ties).
Index bfs_farthest(const std::vector<std::vector<Index>>& adj, Index src,
                   std::vector<int>& dist) {
  std::fill(dist.begin(), dist.end(), -1);
  std::vector<Index> frontier{src}, next;
  dist[static_cast<std::size_t>(src)] = 0;
  Index far = src;
  int far_d = 0;
  while (!frontier.empty()) {
    next.clear();
    for (Index u : frontier) {
      for (Index v : adj[static_cast<std::size_t>(u)]) {
        if (dist[static_cast<std::size_t>(v)] == -1) {
          dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
          next.push_back(v);
          if (dist[static_cast<std::size_t>(v)] > far_d ||
              (dist[static_cast<std::size_t>(v)] == far_d && v < far)) {
            far_d = dist[static_cast<std::size_t>(v)];
            far = v;
          }
        }
      }
    }
    frontier.swap(next);
  }
  return far;
}

std::vector<std::vector<Index>> sym_adj_no_loops(const Graph& g) {
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(g.num_nodes));
  for (Index u = 0; u < g.num_nodes; ++u) {
    for (Index v : g.neighbors(u)) {
      if (u == v) continue;
      adj[static_cast<std::size_t>(u)].push_back(v);
      adj[static_cast<std::size_t>(v)].push_back(u);
    }
  }
  for (auto& nb : adj) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  return adj;
}

}  // namespace

const char* to_string(Mode m) { return m == Mode::Sparse ? "sparse" : "dense"; }

const char* to_string(ModeReason r) {
  switch (r) {
    case ModeReason::ConditionsFailed: return "conditions_failed";
    case ModeReason::ScheduledDense: return "scheduled_dense";
    case ModeReason::ConditionsPassed: return "conditions_passed";
  }
  return "?";
}

ConditionReport check_conditions(const Graph& g_seq, Index layers) {
  ConditionReport rep;
  rep.layers = layers;
  const Index n = g_seq.num_nodes;

  rep.c1_self_attend = true;
  for (Index u = 0; u < n; ++u) {
    if (!g_seq.has_edge(u, u)) {
      rep.c1_self_attend = false;
      break;
    }
  }

  auto adj = sym_adj_no_loops(g_seq);
  Index min_deg = n == 0 ? 0 : static_cast<Index>(adj[0].size());
  for (const auto& nb : adj) min_deg = std::min(min_deg, static_cast<Index>(nb.size()));
  // Dirac: min degree >= N/2 suffices; anything below is inconclusive.
  rep.c2_hamiltonian =
      (n >= 1 && 2 * min_deg >= n) ? HamiltonianCheck::Pass : HamiltonianCheck::Unknown;

  if (n >= 1) {
    std::vector<int> dist(static_cast<std::size_t>(n));
    Index u = bfs_farthest(adj, 0, dist);
    bool connected = std::find(dist.begin(), dist.end(), -1) == dist.end();
    Index v = bfs_farthest(adj, u, dist);
    rep.sweep_from = u;
    rep.sweep_to = v;
    rep.diameter_lower_bound = dist[static_cast<std::size_t>(v)];
    rep.c3_reachable_within_l = connected && rep.diameter_lower_bound <= layers;
  }
  return rep;
}

AttentionMode select_mode(const ConditionReport& report, Index epoch, Index dense_period) {
  if (dense_period < 1) throw ConfigError("select_mode: dense_period must be >= 1");
  if (epoch % dense_period == 0) return {Mode::Dense, ModeReason::ScheduledDense};
  if (!report.all_pass()) return {Mode::Dense, ModeReason::ConditionsFailed};
  return {Mode::Sparse, ModeReason::ConditionsPassed};
}

}  // namespace gte
