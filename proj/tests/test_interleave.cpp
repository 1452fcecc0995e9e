#include <queue>

#include "doctest.h"
#include "gte/interleave.hpp"
#include "oracles.hpp"

using namespace gte;

TEST_SUITE_BEGIN("interleave");

namespace {

Graph complete_with_loops(Index n) {
  std::vector<std::pair<Index, Index>> edges;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) edges.emplace_back(i, j);
  }
  return graph_from_edges(n, edges);
}

int bfs_dist(const Graph& g, Index from, Index to) {
  auto fw = oracle::floyd_warshall(g);
  return fw[from][to];
}

}  // namespace

TEST_CASE("K4 passes everything at one layer") {
  ConditionReport rep = check_conditions(complete_with_loops(4), 1);
  CHECK(rep.c1_self_attend);
  CHECK(rep.c2_hamiltonian == HamiltonianCheck::Pass);
  CHECK(rep.c3_reachable_within_l);
}

TEST_CASE("path P4 fails the Dirac heuristic despite being traceable") {
  Graph p4 = add_self_loops(
      graph_from_edges(4, {{0, 1}, {1, 0}, {1, 2}, {2, 1}, {2, 3}, {3, 2}}));
  ConditionReport rep = check_conditions(p4, 3);
  CHECK(rep.c1_self_attend);
  CHECK(rep.c2_hamiltonian == HamiltonianCheck::Unknown);
  CHECK(rep.c3_reachable_within_l);  // diameter 3 <= 3 layers
}

TEST_CASE("disconnected graphs fail c3") {
  std::vector<std::pair<Index, Index>> edges;
  for (Index base : {Index{0}, Index{3}}) {
    for (Index i = 0; i < 3; ++i) {
      for (Index j = 0; j < 3; ++j) {
        if (i != j) edges.emplace_back(base + i, base + j);
      }
    }
  }
  Graph two_triangles = add_self_loops(graph_from_edges(6, edges));
  ConditionReport rep = check_conditions(two_triangles, 5);
  CHECK_FALSE(rep.c3_reachable_within_l);
}

TEST_CASE("missing self loops fail c1") {
  Graph g = graph_from_edges(2, {{0, 1}, {1, 0}});
  ConditionReport rep = check_conditions(g, 1);
  CHECK_FALSE(rep.c1_self_attend);
}

TEST_CASE("select_mode schedule and fallbacks") {
  ConditionReport pass = check_conditions(complete_with_loops(4), 1);
  REQUIRE(pass.all_pass());

  AttentionMode m = select_mode(pass, 3, 10);
  CHECK(m.mode == Mode::Sparse);
  CHECK(m.reason == ModeReason::ConditionsPassed);

  m = select_mode(pass, 10, 10);
  CHECK(m.mode == Mode::Dense);
  CHECK(m.reason == ModeReason::ScheduledDense);

  ConditionReport fail = pass;
  fail.c3_reachable_within_l = false;
  m = select_mode(fail, 3, 10);
  CHECK(m.mode == Mode::Dense);
  CHECK(m.reason == ModeReason::ConditionsFailed);

  CHECK_THROWS_AS(select_mode(pass, 1, 0), ConfigError);
}

TEST_CASE("dense epochs over a schedule") {
  ConditionReport pass = check_conditions(complete_with_loops(4), 1);
  const Index period = 7, total = 100;
  Index dense = 0;
  for (Index e = 1; e <= total; ++e) {
    if (select_mode(pass, e, period).mode == Mode::Dense) ++dense;
  }
  CHECK(dense == total / period);
}

TEST_CASE("c2 soundness on random graphs") {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Index n = 3 + static_cast<Index>(seed % 10);
    Graph g = add_self_loops(oracle::random_graph(n, 0.3 + 0.05 * (seed % 7), seed, false));
    ConditionReport rep = check_conditions(g, 2);
    if (rep.c2_hamiltonian == HamiltonianCheck::Pass) {
      auto deg = undirected_degrees(g);
      for (Index v = 0; v < n; ++v) CHECK(2 * deg[v] >= n);
    }
  }
}

TEST_CASE("c3 implies the sweep endpoints are within L hops") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    Index n = 5 + static_cast<Index>(seed % 8);
    Graph g = add_self_loops(oracle::random_graph(n, 0.25, 1000 + seed, false));
    Index layers = 3;
    ConditionReport rep = check_conditions(g, layers);
    if (rep.c3_reachable_within_l) {
      CHECK(bfs_dist(g, rep.sweep_from, rep.sweep_to) <= layers);
    }
  }
}

TEST_SUITE_END();
