#include "gte/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <deque>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

namespace gte {

namespace {

constexpr Index kSpdNodeGuard = 20000;

void check_node_range(Index v, Index n, const std::string& what) {
  if (v < 0 || v >= n) {
    throw DataError(what + ": node id " + std::to_string(v) + " out of range [0, " +
                    std::to_string(n) + ")");
  }
}

// Undirected adjacency (both arc directions traversable), self-loops dropped.
std::vector<std::vector<Index>> undirected_adjacency(const Graph& g) {
  std::vector<std::vector<Index>> adj(g.num_nodes);
  for (Index u = 0; u < g.num_nodes; ++u) {
    for (Index v : g.neighbors(u)) {
      if (u == v) continue;
      adj[u].push_back(v);
      adj[v].push_back(u);
    }
  }
  for (auto& nb : adj) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  return adj;
}

}  // namespace

bool Graph::has_edge(Index u, Index v) const {
  auto nb = neighbors(u);
  return std::binary_search(nb.begin(), nb.end(), v);
}

Graph graph_from_edges(Index num_nodes, std::vector<std::pair<Index, Index>> edges) {
  if (num_nodes < 0) throw DataError("graph_from_edges: negative node count");
  for (const auto& [u, v] : edges) {
    check_node_range(u, num_nodes, "graph_from_edges");
    check_node_range(v, num_nodes, "graph_from_edges");
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  Graph g;
  g.num_nodes = num_nodes;
  g.row_offsets.assign(static_cast<std::size_t>(num_nodes) + 1, 0);
  g.col_indices.reserve(edges.size());
  for (const auto& [u, v] : edges) g.row_offsets[u + 1]++;
  for (Index i = 0; i < num_nodes; ++i) g.row_offsets[i + 1] += g.row_offsets[i];
  for (const auto& [u, v] : edges) g.col_indices.push_back(v);
  return g;
}

Graph load_edge_list(std::istream& in, std::optional<Index> num_nodes_hint) {
  std::vector<std::pair<Index, Index>> edges;
  Index max_id = -1;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;

    std::istringstream ls(line);
    std::string tok_a, tok_b, extra;
    ls >> tok_a >> tok_b;
    if (tok_b.empty() || (ls >> extra)) {
      throw DataError("parse error at line " + std::to_string(line_no) +
                      ": expected \"src dst\"");
    }
    Index ids[2];
    const std::string* toks[2] = {&tok_a, &tok_b};
    for (int t = 0; t < 2; ++t) {
      const std::string& s = *toks[t];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), ids[t]);
      if (ec != std::errc() || p != s.data() + s.size()) {
        throw DataError("parse error at line " + std::to_string(line_no) +
                        ": bad token \"" + s + "\"");
      }
      if (ids[t] < 0) {
        throw DataError("range error at line " + std::to_string(line_no) +
                        ": negative node id");
      }
      if (num_nodes_hint && ids[t] >= *num_nodes_hint) {
        throw DataError("range error at line " + std::to_string(line_no) + ": node id " +
                        std::to_string(ids[t]) + " >= hint " + std::to_string(*num_nodes_hint));
      }
      max_id = std::max(max_id, ids[t]);
    }
    edges.emplace_back(ids[0], ids[1]);
  }
  if (!num_nodes_hint && edges.empty()) throw DataError("empty graph");
  Index n = num_nodes_hint ? *num_nodes_hint : max_id + 1;
  return graph_from_edges(n, std::move(edges));
}

Graph symmetrize(const Graph& g) {
  std::vector<std::pair<Index, Index>> edges;
  edges.reserve(static_cast<std::size_t>(g.nnz()) * 2);
  for (Index u = 0; u < g.num_nodes; ++u) {
    for (Index v : g.neighbors(u)) {
      edges.emplace_back(u, v);
      edges.emplace_back(v, u);
    }
  }
  Graph out = graph_from_edges(g.num_nodes, std::move(edges));
  out.features = g.features;
  out.labels = g.labels;
  out.graph_label = g.graph_label;
  return out;
}

Graph add_self_loops(const Graph& g) {
  Graph out;
  out.num_nodes = g.num_nodes;
  out.features = g.features;
  out.labels = g.labels;
  out.graph_label = g.graph_label;
  out.row_offsets.assign(static_cast<std::size_t>(g.num_nodes) + 1, 0);
  out.col_indices.reserve(static_cast<std::size_t>(g.nnz() + g.num_nodes));
  for (Index u = 0; u < g.num_nodes; ++u) {
    auto nb = g.neighbors(u);
    bool placed = false;
    for (Index v : nb) {
      if (!placed && v >= u) {
        if (v != u) out.col_indices.push_back(u);
        placed = true;
      }
      out.col_indices.push_back(v);
    }
    if (!placed) out.col_indices.push_back(u);
    out.row_offsets[u + 1] = static_cast<Index>(out.col_indices.size());
  }
  return out;
}

Real density(const Graph& g) {
  if (g.num_nodes < 1) throw DataError("density: empty graph");
  return static_cast<Real>(g.nnz()) /
         (static_cast<Real>(g.num_nodes) * static_cast<Real>(g.num_nodes));
}

Graph induced_subgraph(const Graph& g, std::span<const Index> nodes) {
  std::vector<Index> new_id(static_cast<std::size_t>(g.num_nodes), -1);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    Index v = nodes[i];
    check_node_range(v, g.num_nodes, "induced_subgraph");
    if (new_id[v] != -1) {
      throw DataError("induced_subgraph: duplicate node " + std::to_string(v));
    }
    new_id[v] = static_cast<Index>(i);
  }
  std::vector<std::pair<Index, Index>> edges;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (Index v : g.neighbors(nodes[i])) {
      if (new_id[v] != -1) edges.emplace_back(static_cast<Index>(i), new_id[v]);
    }
  }
  Graph out = graph_from_edges(static_cast<Index>(nodes.size()), std::move(edges));
  if (!g.features.empty()) {
    out.features = Matrix(static_cast<Index>(nodes.size()), g.features.cols());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      auto src = g.features.row(nodes[i]);
      std::copy(src.begin(), src.end(), out.features.row(static_cast<Index>(i)).begin());
    }
  }
  if (!g.labels.empty()) {
    out.labels.reserve(nodes.size());
    for (Index v : nodes) out.labels.push_back(g.labels[static_cast<std::size_t>(v)]);
  }
  out.graph_label = g.graph_label;
  return out;
}

std::vector<Index> out_degrees(const Graph& g) {
  std::vector<Index> deg(static_cast<std::size_t>(g.num_nodes));
  for (Index u = 0; u < g.num_nodes; ++u) deg[u] = g.row_offsets[u + 1] - g.row_offsets[u];
  return deg;
}

std::vector<Index> in_degrees(const Graph& g) {
  std::vector<Index> deg(static_cast<std::size_t>(g.num_nodes), 0);
  for (Index v : g.col_indices) deg[static_cast<std::size_t>(v)]++;
  return deg;
}

std::vector<Index> undirected_degrees(const Graph& g) {
  auto adj = undirected_adjacency(g);
  std::vector<Index> deg(adj.size());
  for (std::size_t i = 0; i < adj.size(); ++i) deg[i] = static_cast<Index>(adj[i].size());
  return deg;
}

int SpdTable::lookup(Index i, Index j) const {
  const Index* begin = cols.data() + row_offsets[i];
  const Index* end = cols.data() + row_offsets[i + 1];
  const Index* it = std::lower_bound(begin, end, j);
  if (it != end && *it == j) return static_cast<int>(dist[it - cols.data()]);
  return unreachable_bucket();
}

SpdTable spd_table(const Graph& g, int max_dist) {
  if (max_dist < 0) throw ConfigError("spd_table: max_dist must be >= 0");
  if (g.num_nodes > kSpdNodeGuard) {
    throw DataError("spd_table: graph too large for all-pairs BFS (" +
                    std::to_string(g.num_nodes) + " > " + std::to_string(kSpdNodeGuard) + ")");
  }
  auto adj = undirected_adjacency(g);

  SpdTable t;
  t.num_nodes = g.num_nodes;
  t.max_dist = max_dist;
  t.row_offsets.assign(static_cast<std::size_t>(g.num_nodes) + 1, 0);

  std::vector<int> d(static_cast<std::size_t>(g.num_nodes));
  std::vector<Index> frontier, next, touched;
  std::vector<std::pair<Index, int>> reached;
  for (Index src = 0; src < g.num_nodes; ++src) {
    std::fill(d.begin(), d.end(), -1);
    reached.clear();
    frontier.assign(1, src);
    d[src] = 0;
    reached.emplace_back(src, 0);
    int depth = 0;
    while (!frontier.empty() && depth < max_dist) {
      next.clear();
      for (Index u : frontier) {
        for (Index v : adj[u]) {
          if (d[v] == -1) {
            d[v] = depth + 1;
            next.push_back(v);
            reached.emplace_back(v, depth + 1);
          }
        }
      }
      frontier.swap(next);
      ++depth;
    }
    std::sort(reached.begin(), reached.end());
    for (const auto& [v, dv] : reached) {
      t.cols.push_back(v);
      t.dist.push_back(static_cast<std::uint16_t>(dv));
    }
    t.row_offsets[src + 1] = static_cast<Index>(t.cols.size());
  }
  return t;
}

Matrix load_features_csv(std::istream& in, Index expected_rows) {
  std::vector<std::vector<Real>> rows;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::vector<Real> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DataError("features csv: parse error at line " + std::to_string(line_no));
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError("features csv: ragged row at line " + std::to_string(line_no));
    }
    rows.push_back(std::move(row));
  }
  if (static_cast<Index>(rows.size()) != expected_rows) {
    throw DataError("features csv: expected " + std::to_string(expected_rows) + " rows, got " +
                    std::to_string(rows.size()));
  }
  Index f = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  Matrix m(expected_rows, f);
  for (Index i = 0; i < expected_rows; ++i) {
    std::copy(rows[static_cast<std::size_t>(i)].begin(), rows[static_cast<std::size_t>(i)].end(),
              m.row(i).begin());
  }
  return m;
}

Matrix load_features_binary(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "GTF1", 4) != 0) {
    throw DataError("features binary: bad magic, expected GTF1");
  }
  std::uint64_t n = 0, f = 0;
  if (!in.read(reinterpret_cast<char*>(&n), 8) || !in.read(reinterpret_cast<char*>(&f), 8)) {
    throw DataError("features binary: truncated header");
  }
  Matrix m(static_cast<Index>(n), static_cast<Index>(f));
  std::vector<float> buf(static_cast<std::size_t>(f));
  for (std::uint64_t i = 0; i < n; ++i) {
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(f * sizeof(float)))) {
      throw DataError("features binary: truncated at row " + std::to_string(i));
    }
    auto dst = m.row(static_cast<Index>(i));
    for (std::uint64_t j = 0; j < f; ++j) dst[static_cast<std::size_t>(j)] = buf[j];
  }
  return m;
}

void save_features_binary(std::ostream& out, const Matrix& m) {
  out.write("GTF1", 4);
  std::uint64_t n = static_cast<std::uint64_t>(m.rows());
  std::uint64_t f = static_cast<std::uint64_t>(m.cols());
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&f), 8);
  for (Index i = 0; i < m.rows(); ++i) {
    for (Real v : m.row(i)) {
      float x = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&x), sizeof(float));
    }
  }
}

std::vector<int> load_labels(std::istream& in, Index expected_rows) {
  std::vector<int> labels;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    int v = 0;
    auto* b = line.data() + start;
    auto [p, ec] = std::from_chars(b, line.data() + line.size(), v);
    if (ec != std::errc()) {
      throw DataError("labels: parse error at line " + std::to_string(line_no));
    }
    labels.push_back(v);
  }
  if (static_cast<Index>(labels.size()) != expected_rows) {
    throw DataError("labels: expected " + std::to_string(expected_rows) + " entries, got " +
                    std::to_string(labels.size()));
  }
  return labels;
}

}  // namespace gte
