#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gte/config.hpp"
#include "gte/model.hpp"
#include "gte/parallel.hpp"

namespace fs = std::filesystem;
using namespace gte;

namespace {

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

void dump_params(std::ostream& out, ModelParams& params) {
  for_each_tensor(params, [&](const std::string& name, Matrix& m) {
    out << "tensor " << name << " " << m.rows() << " " << m.cols() << "\n";
    for (Index i = 0; i < m.rows(); ++i) {
      auto row = m.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", row[j]);
        out << (j ? " " : "") << buf;
      }
      out << "\n";
    }
  });
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg = load_config(config_path);
  apply_overrides(cfg, sets);
  validate_keys(cfg, "train");
  TrainConfig tc = to_train_config(cfg);
  Dataset ds = load_dataset(cfg);

  fs::path out_dir = cfg.get_str("out_dir", ".");
  fs::create_directories(out_dir);
  fs::path metrics_path = out_dir / cfg.get_str("metrics_file", "metrics.csv");
  fs::path params_path = out_dir / cfg.get_str("params_file", "params.txt");
  std::string ledger_name = cfg.get_str("ledger_file", "");

  Trainer trainer(std::move(ds), tc);
  std::ofstream metrics(metrics_path);
  if (!metrics) throw DataError("train: cannot write " + metrics_path.string());
  metrics << "epoch,mode,reason,beta_thre,loss,avg_loss,ldr,epoch_time_s,accuracy,"
             "dropped_edges,comm_elements\n";
  std::ofstream ledger_out;
  if (!ledger_name.empty()) {
    ledger_out.open(out_dir / ledger_name);
    ledger_out << "epoch,layer,worker,collective,elements,cross_elements\n";
  }

  try {
    for (Index e = 1; e <= tc.epochs; ++e) {
      EpochStats st = trainer.train_epoch();
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%lld,%s,%s,%.17g,%.17g,%.17g,%.17g,%.6f,%.17g,%lld,%lld\n",
                    static_cast<long long>(st.epoch), to_string(st.mode), to_string(st.reason),
                    st.beta_thre, st.loss, st.avg_loss, st.ldr, st.epoch_time_s, st.accuracy,
                    static_cast<long long>(st.dropped_edges),
                    static_cast<long long>(st.comm_elements));
      metrics << buf;
      if (ledger_out.is_open()) {
        const auto& layers = trainer.layer_ledgers();
        for (std::size_t l = 0; l < layers.size(); ++l) {
          for (std::size_t w = 0; w < layers[l].workers.size(); ++w) {
            const auto& en = layers[l].workers[w];
            ledger_out << st.epoch << "," << l << "," << w << ",qkv_gather," << en.qkv_gather
                       << "," << en.qkv_gather_cross << "\n";
            ledger_out << st.epoch << "," << l << "," << w << ",output_scatter,"
                       << en.output_scatter << "," << en.output_scatter_cross << "\n";
            ledger_out << st.epoch << "," << l << "," << w << ",bias_exchange,"
                       << en.bias_exchange << ",0\n";
          }
        }
      }
    }
  } catch (const DivergenceError& e) {
    // State dump so the failure is inspectable, then the divergence exit code.
    std::ofstream dump(out_dir / "diverged_params.txt");
    dump_params(dump, trainer.mutable_params());
    std::cerr << "error: " << e.what() << " (state dumped to "
              << (out_dir / "diverged_params.txt").string() << ")\n";
    return 4;
  }
  std::ofstream pf(params_path);
  dump_params(pf, trainer.mutable_params());
  std::cout << "trained " << tc.epochs << " epochs; metrics at " << metrics_path.string() << "\n";
  return 0;
}

Graph random_pattern_graph(Index n, Real target_density, std::uint64_t seed) {
  std::int64_t want = std::llround(target_density * static_cast<Real>(n) * static_cast<Real>(n));
  if (want < n) throw ConfigError("bench: density too low to keep self-loops");
  std::vector<std::pair<Index, Index>> edges;
  edges.reserve(static_cast<std::size_t>(want));
  for (Index i = 0; i < n; ++i) edges.emplace_back(i, i);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  Graph g = graph_from_edges(n, edges);
  while (g.nnz() < want) {
    Index u = pick(rng), v = pick(rng);
    if (u == v || g.has_edge(u, v)) continue;
    edges.emplace_back(u, v);
    g = graph_from_edges(n, edges);
  }
  return g;
}

int cmd_bench(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg = load_config(config_path);
  apply_overrides(cfg, sets);
  validate_keys(cfg, "bench");

  std::vector<Index> seq_lens = cfg.get_int_list("bench_seq_lens", {64, 128});
  std::vector<Index> dims = cfg.get_int_list("bench_hidden_dims", {16});
  Real beta = cfg.get_real("bench_density", 0.1);
  std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  std::string patterns = cfg.get_str("bench_patterns", "dense,edge,cluster");
  if (seq_lens.empty() || dims.empty()) throw ConfigError("bench: empty sweep");

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (cfg.has("bench_report")) {
    file.open(cfg.get_str("bench_report", ""));
    out = &file;
  }
  *out << "s,d,pattern,pairs,score_macs,weight_macs,wall_ms\n";

  auto run_point = [&](Index s, Index d, const std::string& pattern, const Graph& g) {
    std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(s) << 20) ^ static_cast<std::uint64_t>(d));
    Matrix q = Matrix::randn(s, d, 1.0, rng);
    Matrix k = Matrix::randn(s, d, 1.0, rng);
    Matrix v = Matrix::randn(s, d, 1.0, rng);
    MacCounter macs;
    Index pairs = 0;
    auto t0 = std::chrono::steady_clock::now();
    if (pattern == "dense") {
      auto r = dense_attention(q, k, v);
      macs = r.macs;
      pairs = s * s;
    } else if (pattern == "edge") {
      auto r = edge_sparse_attention(q, k, v, g);
      macs = r.macs;
      pairs = g.nnz();
    } else {
      Index kk = cfg.get_int("cluster_k", 8);
      while (kk > g.num_nodes) kk /= 2;
      Permutation p = reorder(g, kk, seed);
      ClusterGrid grid = build_cluster_grid(g, p, kk);
      Graph gp = permute_graph(g, p);
      Real bg = density(g);
      Real theta = cfg.get_real("beta_thre", std::min(5.0 * bg, 1.0));
      Index d_b = cfg.get_int("block_dim", 4);
      ClusterSparseLayout layout =
          build_layout(grid, gp, TransferStrategy::Elastic, theta, bg, d_b);
      auto t1 = std::chrono::steady_clock::now();  // layout build excluded from kernel time
      auto r = cluster_sparse_attention(q, k, v, layout);
      macs = r.macs;
      pairs = layout.pattern.nnz();
      t0 = t1;
    }
    auto t2 = std::chrono::steady_clock::now();
    double ms = std::chrono::duration<double, std::milli>(t2 - t0).count();
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%s,%lld,%lld,%lld,%.3f\n",
                  static_cast<long long>(s), static_cast<long long>(d), pattern.c_str(),
                  static_cast<long long>(pairs), static_cast<long long>(macs.score_macs),
                  static_cast<long long>(macs.weight_macs), ms);
    *out << buf;
    return macs;
  };

  for (Index s : seq_lens) {
    Graph g = random_pattern_graph(s, beta, seed ^ static_cast<std::uint64_t>(s));
    for (Index d : dims) {
      MacCounter dense_macs, edge_macs;
      bool have_dense = false, have_edge = false;
      std::stringstream ps(patterns);
      std::string pat;
      while (std::getline(ps, pat, ',')) {
        MacCounter m = run_point(s, d, pat, g);
        if (pat == "dense") {
          dense_macs = m;
          have_dense = true;
        } else if (pat == "edge") {
          edge_macs = m;
          have_edge = true;
        }
      }
      if (have_dense && have_edge) {
        // Complexity identity: edge/dense MAC ratio equals pattern density.
        if (edge_macs.score_macs * s * s != dense_macs.score_macs * g.nnz()) {
          throw DataError("bench: MAC ratio violates the density identity");
        }
      }
    }
  }

  if (cfg.has("bench_db_list")) {
    std::vector<Index> dbs = cfg.get_int_list("bench_db_list", {});
    Index s = seq_lens.back();
    Index d = dims.back();
    Graph g = random_pattern_graph(s, beta, seed ^ static_cast<std::uint64_t>(s));
    Index kk = cfg.get_int("cluster_k", 8);
    while (kk > g.num_nodes) kk /= 2;
    Permutation p = reorder(g, kk, seed);
    ClusterGrid grid = build_cluster_grid(g, p, kk);
    Graph gp = permute_graph(g, p);
    Real bg = density(g);
    *out << "db_profile";
    std::mt19937_64 rng(seed);
    Matrix q = Matrix::randn(s, d, 1.0, rng);
    Matrix k = Matrix::randn(s, d, 1.0, rng);
    Matrix v = Matrix::randn(s, d, 1.0, rng);
    for (Index db : dbs) {
      ClusterSparseLayout layout = build_layout(grid, gp, TransferStrategy::Elastic,
                                                std::min(5.0 * bg, 1.0), bg, db);
      auto t0 = std::chrono::steady_clock::now();
      auto r = cluster_sparse_attention(q, k, v, layout);
      auto t1 = std::chrono::steady_clock::now();
      double sec = std::chrono::duration<double>(t1 - t0).count();
      double thr = static_cast<double>(r.macs.score_macs) / std::max(sec, 1e-9);
      char buf[64];
      std::snprintf(buf, sizeof(buf), " %lld:%.3g", static_cast<long long>(db), thr);
      *out << buf;
    }
    *out << "\n";
  }
  return 0;
}

Graph load_graph_arg(const std::string& path, bool undirected, std::optional<Index> hint) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  Graph g = load_edge_list(in, hint);
  if (undirected) g = symmetrize(g);
  return g;
}

int cmd_reorder(const std::string& graph_path, Index k, std::uint64_t seed,
                const std::string& out_path, bool undirected) {
  Graph g = load_graph_arg(graph_path, undirected, {});
  Permutation p = reorder(g, k, seed);
  ClusterGrid before = build_cluster_grid(g, Permutation::identity(g.num_nodes), k);
  ClusterGrid after = build_cluster_grid(g, p, k);
  if (out_path.empty()) {
    save_permutation(std::cout, p);
  } else {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    save_permutation(out, p);
  }
  std::cerr << "nodes " << g.num_nodes << " nnz " << g.nnz() << " diagonal_fraction_before "
            << diagonal_edge_fraction(before) << " after " << diagonal_edge_fraction(after)
            << "\n";
  return 0;
}

int cmd_inspect(const std::string& graph_path, Index k, Index d_b, Real beta_thre,
                const std::string& strategy, std::uint64_t seed, bool undirected) {
  Graph raw = load_graph_arg(graph_path, undirected, {});
  Graph g = add_self_loops(raw);
  Real bg = density(g);
  Permutation p = reorder(g, k, seed);
  ClusterGrid before = build_cluster_grid(g, Permutation::identity(g.num_nodes), k);
  ClusterGrid grid = build_cluster_grid(g, p, k);
  Graph gp = permute_graph(g, p);
  TransferStrategy strat =
      strategy == "indolent" ? TransferStrategy::Indolent : TransferStrategy::Elastic;
  if (strategy != "indolent" && strategy != "elastic") {
    throw ConfigError("inspect: strategy must be indolent|elastic");
  }
  Real theta = beta_thre >= 0 ? beta_thre : std::min(5.0 * bg, 1.0);
  ClusterSparseLayout layout = build_layout(grid, gp, strat, theta, bg, d_b);

  std::cout << "beta_G " << bg << " beta_thre " << theta << " strategy " << strategy << "\n";
  std::cout << "diagonal_edge_fraction before " << diagonal_edge_fraction(before) << " after "
            << diagonal_edge_fraction(grid) << "\n";
  std::cout << "transferred_cells " << layout.transferred_cells() << " of " << k * k
            << " subblocks " << layout.subblock_count() << " dropped_edges "
            << layout.dropped_edges << "\n";
  dump_layout(std::cout, layout, grid);
  return 0;
}

int cmd_gen_sbm(Index nodes, Index blocks, Real p_in, Real p_out, Real noise,
                std::uint64_t seed, const std::string& prefix) {
  Graph g = generate_sbm(nodes, blocks, p_in, p_out, seed, noise);
  {
    std::ofstream out(prefix + ".edges");
    if (!out) throw DataError("cannot write " + prefix + ".edges");
    out << "# sbm nodes=" << nodes << " blocks=" << blocks << " p_in=" << p_in
        << " p_out=" << p_out << " seed=" << seed << "\n";
    for (Index u = 0; u < g.num_nodes; ++u) {
      for (Index v : g.neighbors(u)) out << u << " " << v << "\n";
    }
  }
  {
    std::ofstream out(prefix + ".features.csv");
    for (Index i = 0; i < g.num_nodes; ++i) {
      auto row = g.features.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", row[j]);
        out << (j ? "," : "") << buf;
      }
      out << "\n";
    }
  }
  {
    std::ofstream out(prefix + ".labels");
    for (int y : g.labels) out << y << "\n";
  }
  std::cout << "wrote " << prefix << ".edges (" << g.nnz() << " arcs), .features.csv, .labels\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graph transformer training engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  auto* train = app.add_subcommand("train", "train from a config file");
  train->add_option("config", config_path, "config file")->required();
  train->add_option("--set", sets, "override config keys (key=value)");

  auto* bench = app.add_subcommand("bench", "attention kernel micro-benchmarks");
  bench->add_option("config", config_path, "config file")->required();
  bench->add_option("--set", sets, "override config keys (key=value)");

  std::string graph_path, out_path, strategy = "elastic";
  Index k = 8, d_b = 4;
  Real beta_thre = -1;
  std::uint64_t seed = 1;
  bool undirected = false;
  auto* reord = app.add_subcommand("reorder", "cluster-aware node reordering");
  reord->add_option("graph", graph_path, "edge-list file")->required();
  reord->add_option("-k", k, "cluster count (power of two)");
  reord->add_option("--seed", seed, "seed");
  reord->add_option("-o,--out", out_path, "permutation output path");
  reord->add_flag("--undirected", undirected, "emit both arcs for each input edge");

  auto* inspect = app.add_subcommand("inspect", "cluster grid and layout report");
  inspect->add_option("graph", graph_path, "edge-list file")->required();
  inspect->add_option("-k", k, "cluster count (power of two)");
  inspect->add_option("--d-b", d_b, "sub-block dimension");
  inspect->add_option("--beta-thre", beta_thre, "transfer threshold (default 5*beta_G)");
  inspect->add_option("--strategy", strategy, "indolent|elastic");
  inspect->add_option("--seed", seed, "seed");
  inspect->add_flag("--undirected", undirected, "emit both arcs for each input edge");

  Index nodes = 80, blocks = 2;
  Real p_in = 0.5, p_out = 0.01, noise = 0.1;
  std::string prefix = "sbm";
  auto* gen = app.add_subcommand("gen-sbm", "generate a planted-partition dataset");
  gen->add_option("--nodes", nodes, "node count");
  gen->add_option("--blocks", blocks, "block count");
  gen->add_option("--p-in", p_in, "intra-block edge probability");
  gen->add_option("--p-out", p_out, "inter-block edge probability");
  gen->add_option("--noise-std", noise, "feature noise std");
  gen->add_option("--seed", seed, "seed");
  gen->add_option("-o,--out", prefix, "output path prefix");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config_path, sets);
    if (*bench) return cmd_bench(config_path, sets);
    if (*reord) return cmd_reorder(graph_path, k, seed, out_path, undirected);
    if (*inspect) return cmd_inspect(graph_path, k, d_b, beta_thre, strategy, seed, undirected);
    if (*gen) return cmd_gen_sbm(nodes, blocks, p_in, p_out, noise, seed, prefix);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
