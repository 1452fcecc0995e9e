#pragma once

// Independent reference implementations the tests check against. These stay
// deliberately naive and separate from the library code paths.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "gte/attention.hpp"
#include "gte/graph.hpp"
#include "gte/matrix.hpp"

namespace oracle {

using gte::Graph;
using gte::Index;
using gte::Matrix;
using gte::Real;

// Two-loop scalar attention: full score matrix, naive softmax, explicit sums.
inline Matrix dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                              const Matrix* bias = nullptr) {
  const Index s = q.rows(), dk = q.cols(), dv = v.cols();
  std::vector<std::vector<Real>> score(s, std::vector<Real>(s, 0.0));
  for (Index i = 0; i < s; ++i) {
    for (Index j = 0; j < s; ++j) {
      Real acc = 0;
      for (Index t = 0; t < dk; ++t) acc += q(i, t) * k(j, t);
      score[i][j] = acc / std::sqrt(static_cast<Real>(dk)) + (bias ? (*bias)(i, j) : 0.0);
    }
  }
  Matrix out(s, dv);
  for (Index i = 0; i < s; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (Index j = 0; j < s; ++j) mx = std::max(mx, score[i][j]);
    Real denom = 0;
    for (Index j = 0; j < s; ++j) denom += std::exp(score[i][j] - mx);
    for (Index j = 0; j < s; ++j) {
      Real w = std::exp(score[i][j] - mx) / denom;
      for (Index t = 0; t < dv; ++t) out(i, t) += w * v(j, t);
    }
  }
  return out;
}

// All-pairs shortest paths over the undirected structure, Floyd-Warshall.
inline std::vector<std::vector<int>> floyd_warshall(const Graph& g) {
  const Index n = g.num_nodes;
  const int inf = 1 << 20;
  std::vector<std::vector<int>> d(n, std::vector<int>(n, inf));
  for (Index i = 0; i < n; ++i) d[i][i] = 0;
  for (Index u = 0; u < n; ++u) {
    for (Index v : g.neighbors(u)) {
      if (u == v) continue;
      d[u][v] = 1;
      d[v][u] = 1;
    }
  }
  for (Index m = 0; m < n; ++m) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        if (d[i][m] + d[m][j] < d[i][j]) d[i][j] = d[i][m] + d[m][j];
      }
    }
  }
  return d;
}

inline Graph random_graph(Index n, Real p, std::uint64_t seed, bool with_loops) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  std::vector<std::pair<Index, Index>> edges;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      if (u(rng) < p) edges.emplace_back(i, j);
    }
  }
  Graph g = gte::graph_from_edges(n, std::move(edges));
  return with_loops ? gte::add_self_loops(g) : g;
}

// Central finite differences of a scalar function at x, step h.
template <typename F>
Real central_diff(F&& f, Real& x, Real h) {
  const Real saved = x;
  x = saved + h;
  Real up = f();
  x = saved - h;
  Real down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

inline bool grad_close(Real analytic, Real fd, Real rel_tol, Real floor = 1e-5) {
  Real scale = std::max({std::abs(analytic), std::abs(fd), floor});
  return std::abs(analytic - fd) <= rel_tol * scale;
}

}  // namespace oracle
