#include <sstream>

#include "doctest.h"
#include "gte/graph.hpp"
#include "oracles.hpp"

using namespace gte;

TEST_SUITE_BEGIN("graph");

TEST_CASE("load_edge_list basics") {
  std::istringstream in("0 1\n1 2");
  Graph g = load_edge_list(in);
  CHECK(g.num_nodes == 3);
  CHECK(g.nnz() == 2);

  std::istringstream dup("0 1\n0 1");
  Graph g2 = load_edge_list(dup);
  CHECK(g2.num_nodes == 2);
  CHECK(g2.nnz() == 1);

  std::istringstream bad("0 x");
  CHECK_THROWS_WITH_AS(load_edge_list(bad), doctest::Contains("line 1"), DataError);

  std::istringstream over("0 5");
  CHECK_THROWS_AS(load_edge_list(over, 3), DataError);

  std::istringstream empty("");
  CHECK_THROWS_WITH_AS(load_edge_list(empty), doctest::Contains("empty graph"), DataError);

  std::istringstream with_hint("# comment\n\n0 1");
  Graph g3 = load_edge_list(with_hint, 5);
  CHECK(g3.num_nodes == 5);
  CHECK(g3.nnz() == 1);

  std::istringstream extra("0 1 2");
  CHECK_THROWS_AS(load_edge_list(extra), DataError);
}

TEST_CASE("add_self_loops") {
  Graph g = graph_from_edges(3, {{0, 1}, {1, 2}});
  Graph sl = add_self_loops(g);
  CHECK(sl.nnz() == 5);
  for (Index i = 0; i < 3; ++i) CHECK(sl.has_edge(i, i));
  CHECK(sl.has_edge(0, 1));
  CHECK(sl.has_edge(1, 2));

  Graph again = add_self_loops(sl);
  CHECK(again.nnz() == sl.nnz());
  CHECK(again.col_indices == sl.col_indices);

  Graph single = add_self_loops(graph_from_edges(1, {}));
  CHECK(single.nnz() == 1);
  CHECK(single.has_edge(0, 0));
}

TEST_CASE("density") {
  Graph g = graph_from_edges(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
  CHECK(density(g) == doctest::Approx(0.25));

  // ogbn-arxiv shape: 169343 nodes, 1166243 edges -> ~4.1e-5.
  Graph fake;
  fake.num_nodes = 169343;
  fake.row_offsets.assign(169344, 0);
  fake.col_indices.assign(1166243, 0);
  CHECK(density(fake) == doctest::Approx(4.1e-5).epsilon(0.01));

  std::vector<std::pair<Index, Index>> all;
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 5; ++j) all.emplace_back(i, j);
  }
  CHECK(density(graph_from_edges(5, all)) == 1.0);
}

TEST_CASE("spd_table paths and caps") {
  Graph path = graph_from_edges(3, {{0, 1}, {1, 0}, {1, 2}, {2, 1}});
  SpdTable t = spd_table(path, 4);
  CHECK(t.lookup(0, 2) == 2);
  CHECK(t.lookup(0, 0) == 0);
  CHECK(t.lookup(0, 1) == 1);

  SpdTable capped = spd_table(path, 1);
  CHECK(capped.lookup(0, 2) == capped.unreachable_bucket());

  Graph disc = graph_from_edges(2, {});
  SpdTable td = spd_table(disc, 3);
  CHECK(td.lookup(0, 1) == td.unreachable_bucket());
}

TEST_CASE("spd_table matches Floyd-Warshall on random graphs") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Graph g = oracle::random_graph(30 + static_cast<Index>(seed) * 4, 0.08, seed, false);
    const int cap = 5;
    SpdTable t = spd_table(g, cap);
    auto fw = oracle::floyd_warshall(g);
    for (Index i = 0; i < g.num_nodes; ++i) {
      for (Index j = 0; j < g.num_nodes; ++j) {
        int expect = fw[i][j] > cap ? t.unreachable_bucket() : fw[i][j];
        CHECK(t.lookup(i, j) == expect);
      }
    }
  }
}

TEST_CASE("spd guard") {
  Graph big;
  big.num_nodes = 20001;
  big.row_offsets.assign(20002, 0);
  CHECK_THROWS_AS(spd_table(big, 2), DataError);
}

TEST_CASE("induced_subgraph") {
  std::vector<std::pair<Index, Index>> k3;
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 3; ++j) {
      if (i != j) k3.emplace_back(i, j);
    }
  }
  Graph g = graph_from_edges(3, k3);
  std::vector<Index> nodes = {0, 1};
  Graph sub = induced_subgraph(g, nodes);
  CHECK(sub.num_nodes == 2);
  CHECK(sub.nnz() == 2);
  CHECK(sub.has_edge(0, 1));
  CHECK(sub.has_edge(1, 0));

  std::vector<Index> all = {0, 1, 2};
  Graph copy = induced_subgraph(g, all);
  CHECK(copy.nnz() == g.nnz());
  CHECK(copy.col_indices == g.col_indices);

  std::vector<Index> dup = {0, 0};
  CHECK_THROWS_AS(induced_subgraph(g, dup), DataError);
  std::vector<Index> oob = {0, 7};
  CHECK_THROWS_AS(induced_subgraph(g, oob), DataError);
}

TEST_CASE("induced_subgraph carries features and labels") {
  Graph g = graph_from_edges(3, {{0, 1}});
  g.features = Matrix(3, 2);
  for (Index i = 0; i < 3; ++i) {
    g.features(i, 0) = static_cast<Real>(i);
    g.features(i, 1) = 10.0 + static_cast<Real>(i);
  }
  g.labels = {5, 6, 7};
  std::vector<Index> nodes = {2, 0};
  Graph sub = induced_subgraph(g, nodes);
  CHECK(sub.features(0, 0) == 2.0);
  CHECK(sub.features(1, 1) == 10.0);
  CHECK(sub.labels == std::vector<int>{7, 5});
}

TEST_CASE("self-loop density property") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Graph g = oracle::random_graph(20, 0.15, 100 + seed, false);
    CHECK(density(add_self_loops(g)) >= density(g));
    Graph looped = add_self_loops(g);
    CHECK(density(add_self_loops(looped)) == density(looped));
  }
}

TEST_CASE("deterministic ingestion pipeline") {
  std::string text = "0 1\n2 3\n1 2\n0 1\n";
  std::istringstream a(text), b(text);
  Graph ga = add_self_loops(load_edge_list(a));
  Graph gb = add_self_loops(load_edge_list(b));
  CHECK(ga.col_indices == gb.col_indices);
  CHECK(ga.row_offsets == gb.row_offsets);
  CHECK(density(ga) == density(gb));
}

TEST_CASE("degrees") {
  Graph g = graph_from_edges(3, {{0, 1}, {0, 2}, {1, 0}});
  auto dout = out_degrees(g);
  auto din = in_degrees(g);
  CHECK(dout == std::vector<Index>{2, 1, 0});
  CHECK(din == std::vector<Index>{1, 1, 1});
  auto und = undirected_degrees(g);
  CHECK(und == std::vector<Index>{2, 1, 1});
}

TEST_CASE("features binary round trip") {
  Matrix m(3, 2);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(i) * 0.5f;
  std::stringstream buf;
  save_features_binary(buf, m);
  Matrix back = load_features_binary(buf);
  CHECK(back.rows() == 3);
  CHECK(back.cols() == 2);
  for (Index i = 0; i < m.size(); ++i) CHECK(back.data()[i] == doctest::Approx(m.data()[i]));

  std::stringstream bad("NOPE");
  CHECK_THROWS_AS(load_features_binary(bad), DataError);
}

TEST_CASE("features csv") {
  std::istringstream in("1.0,2.0\n3.0,4.0\n");
  Matrix m = load_features_csv(in, 2);
  CHECK(m(1, 1) == 4.0);
  std::istringstream wrong("1.0,2.0\n");
  CHECK_THROWS_AS(load_features_csv(wrong, 2), DataError);
  std::istringstream ragged("1.0,2.0\n3.0\n");
  CHECK_THROWS_AS(load_features_csv(ragged, 2), DataError);
}

TEST_SUITE_END();
