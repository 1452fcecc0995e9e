#include "gte/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace gte {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

const std::set<std::string>& common_keys() {
  static const std::set<std::string> keys = {
      "dataset", "edge_list", "features", "labels_file", "undirected_input", "num_nodes",
      "task", "sbm_nodes", "sbm_blocks", "sbm_p_in", "sbm_p_out", "sbm_noise_std",
      "layers", "hidden_dim", "heads", "ffn_dim", "num_classes",
      "lr_start", "lr_end", "lr_power", "momentum",
      "dropout_attn", "dropout_input", "dropout_other",
      "dense_period", "strategy", "auto_tune", "beta_thre",
      "cluster_k", "block_dim", "l2_bytes", "k_formula_i", "db_profile",
      "spd_cap", "max_degree_bucket", "workers", "seed", "epochs",
      "tuner_delta", "tuner_clock", "eval_pattern", "eval_each_epoch",
      "out_dir", "metrics_file", "params_file", "ledger_file",
  };
  return keys;
}

const std::set<std::string>& bench_keys() {
  static const std::set<std::string> keys = {
      "bench_seq_lens", "bench_hidden_dims", "bench_patterns", "bench_density",
      "bench_db_list",  "bench_report",
  };
  return keys;
}

}  // namespace

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : it->second;
}

Index RunConfig::get_int(const std::string& key, Index fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    std::size_t used = 0;
    Index v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + it->second + "'");
  }
}

Real RunConfig::get_real(const std::string& key, Real fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    std::size_t used = 0;
    Real v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + it->second + "'");
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + it->second + "'");
}

std::vector<Index> RunConfig::get_int_list(const std::string& key,
                                           const std::vector<Index>& fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  std::vector<Index> out;
  std::stringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoll(tok));
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' expects a comma-separated integer list");
    }
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' list is empty");
  return out;
}

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config: empty key at line " + std::to_string(line_no));
    }
    cfg.values[key] = value;
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("config: cannot open " + path);
  return parse_config(in);
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& [k, v] : cfg.values) out << k << " = " << v << "\n";
  return out.str();
}

void validate_keys(const RunConfig& cfg, const std::string& command) {
  for (const auto& [key, value] : cfg.values) {
    bool known = common_keys().count(key) > 0;
    if (!known && command == "bench") known = bench_keys().count(key) > 0;
    if (!known) throw ConfigError("config: unknown key '" + key + "'");
  }
}

TrainConfig to_train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.layers = cfg.get_int("layers", tc.layers);
  tc.hidden_dim = cfg.get_int("hidden_dim", tc.hidden_dim);
  tc.heads = cfg.get_int("heads", tc.heads);
  tc.ffn_dim = cfg.get_int("ffn_dim", tc.ffn_dim);
  tc.lr_start = cfg.get_real("lr_start", tc.lr_start);
  tc.lr_end = cfg.get_real("lr_end", tc.lr_end);
  tc.lr_power = cfg.get_real("lr_power", tc.lr_power);
  tc.momentum = cfg.get_real("momentum", tc.momentum);
  tc.dropout_attn = cfg.get_real("dropout_attn", tc.dropout_attn);
  tc.dropout_input = cfg.get_real("dropout_input", tc.dropout_input);
  tc.dropout_other = cfg.get_real("dropout_other", tc.dropout_other);
  tc.dense_period = cfg.get_int("dense_period", tc.dense_period);
  std::string strat = cfg.get_str("strategy", "none");
  if (strat == "none") tc.strategy = Strategy::None;
  else if (strat == "indolent") tc.strategy = Strategy::Indolent;
  else if (strat == "elastic") tc.strategy = Strategy::Elastic;
  else throw ConfigError("config: strategy must be none|indolent|elastic");
  tc.auto_tune = cfg.get_bool("auto_tune", tc.auto_tune);
  tc.beta_thre_override = cfg.get_real("beta_thre", tc.beta_thre_override);
  tc.cluster_k = cfg.get_int("cluster_k", tc.cluster_k);
  tc.block_dim = cfg.get_int("block_dim", tc.block_dim);
  tc.l2_bytes = cfg.get_int("l2_bytes", tc.l2_bytes);
  tc.k_formula_i = cfg.get_int("k_formula_i", tc.k_formula_i);
  if (cfg.has("db_profile")) {
    std::stringstream ss(cfg.get_str("db_profile", ""));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      std::size_t colon = tok.find(':');
      if (colon == std::string::npos) {
        throw ConfigError("config: db_profile entries look like '16:2.4'");
      }
      try {
        tc.db_profile[std::stoll(tok.substr(0, colon))] = std::stod(tok.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError("config: bad db_profile entry '" + tok + "'");
      }
    }
  }
  tc.spd_cap = cfg.get_int("spd_cap", tc.spd_cap);
  tc.max_degree_bucket = cfg.get_int("max_degree_bucket", tc.max_degree_bucket);
  tc.workers = cfg.get_int("workers", tc.workers);
  tc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<Index>(tc.seed)));
  if (const char* env = std::getenv("GT_SEED")) {
    try {
      tc.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("GT_SEED must be an integer");
    }
  }
  tc.epochs = cfg.get_int("epochs", tc.epochs);
  tc.tuner_delta = cfg.get_int("tuner_delta", tc.tuner_delta);
  std::string clock = cfg.get_str("tuner_clock", "fixed");
  if (clock == "fixed") tc.tuner_wall_clock = false;
  else if (clock == "wall") tc.tuner_wall_clock = true;
  else throw ConfigError("config: tuner_clock must be fixed|wall");
  tc.num_classes = cfg.get_int("num_classes", tc.num_classes);
  std::string task = cfg.get_str("task", "node");
  if (task == "node") tc.task = Task::Node;
  else if (task == "graph") tc.task = Task::Graph;
  else throw ConfigError("config: task must be node|graph");
  std::string ev = cfg.get_str("eval_pattern", "dense");
  if (ev == "dense") tc.eval_pattern = ForcedPattern::Dense;
  else if (ev == "sparse") tc.eval_pattern = ForcedPattern::EdgeSparse;
  else if (ev == "auto") tc.eval_pattern = ForcedPattern::Auto;
  else throw ConfigError("config: eval_pattern must be dense|sparse|auto");
  tc.eval_each_epoch = cfg.get_bool("eval_each_epoch", tc.eval_each_epoch);

  if (tc.workers < 1) throw ConfigError("config: workers must be >= 1");
  if (tc.heads < 1 || tc.hidden_dim < 1) throw ConfigError("config: dims must be positive");
  if (tc.hidden_dim % tc.heads != 0) {
    throw ConfigError("config: heads must divide hidden_dim");
  }
  if (tc.heads % tc.workers != 0) {
    throw ConfigError("config: workers must divide heads");
  }
  return tc;
}

Dataset load_dataset(const RunConfig& cfg) {
  Dataset ds;
  std::string task = cfg.get_str("task", "node");
  ds.task = task == "graph" ? Task::Graph : Task::Node;
  ds.num_classes = cfg.get_int("num_classes", 0);

  std::string kind = cfg.get_str("dataset", "sbm");
  if (kind == "sbm") {
    Index n = cfg.get_int("sbm_nodes", 80);
    Index blocks = cfg.get_int("sbm_blocks", 2);
    Real p_in = cfg.get_real("sbm_p_in", 0.5);
    Real p_out = cfg.get_real("sbm_p_out", 0.01);
    Real noise = cfg.get_real("sbm_noise_std", 0.1);
    std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
    if (const char* env = std::getenv("GT_SEED")) seed = std::stoull(env);
    ds.graphs.push_back(generate_sbm(n, blocks, p_in, p_out, seed, noise));
    return ds;
  }
  if (kind != "file") throw ConfigError("config: dataset must be sbm|file");

  std::string edge_path = cfg.get_str("edge_list", "");
  if (edge_path.empty()) throw ConfigError("config: dataset=file requires edge_list");
  std::ifstream in(edge_path);
  if (!in) throw DataError("dataset: cannot open " + edge_path);
  std::optional<Index> hint;
  if (cfg.has("num_nodes")) hint = cfg.get_int("num_nodes", 0);
  Graph g = load_edge_list(in, hint);
  if (cfg.get_bool("undirected_input", false)) g = symmetrize(g);

  if (cfg.has("features")) {
    std::string path = cfg.get_str("features", "");
    std::ifstream fin(path, std::ios::binary);
    if (!fin) throw DataError("dataset: cannot open " + path);
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".bin") {
      g.features = load_features_binary(fin);
      if (g.features.rows() != g.num_nodes) {
        throw DataError("dataset: feature row count does not match node count");
      }
    } else {
      g.features = load_features_csv(fin, g.num_nodes);
    }
  }
  if (cfg.has("labels_file")) {
    std::ifstream lin(cfg.get_str("labels_file", ""));
    if (!lin) throw DataError("dataset: cannot open " + cfg.get_str("labels_file", ""));
    g.labels = load_labels(lin, g.num_nodes);
  }
  ds.graphs.push_back(std::move(g));
  return ds;
}

}  // namespace gte
