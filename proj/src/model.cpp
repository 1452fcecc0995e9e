#include "gte/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

namespace gte {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Real gelu(Real x) {
  constexpr Real c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr Real a = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

Real gelu_grad(Real x) {
  constexpr Real c = 0.7978845608028654;
  constexpr Real a = 0.044715;
  Real u = c * (x + a * x * x * x);
  Real t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x);
}

// X W + b with b broadcast over rows.
Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = matmul(x, w);
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
  }
  return out;
}

void accumulate_bias_grad(const Matrix& dout, Matrix& db) {
  for (Index i = 0; i < dout.rows(); ++i) {
    for (Index j = 0; j < dout.cols(); ++j) db(0, j) += dout(i, j);
  }
}

Matrix draw_mask(Index rows, Index cols, Real drop_rate, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  const Real keep = 1.0 - drop_rate;
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng) < keep ? 1.0 / keep : 0.0;
  return m;
}

std::vector<Real> draw_mask_vec(std::size_t n, Real drop_rate, std::mt19937_64& rng) {
  std::vector<Real> m(n);
  const Real keep = 1.0 - drop_rate;
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  for (Real& v : m) v = u(rng) < keep ? 1.0 / keep : 0.0;
  return m;
}

void mul_mask_inplace(Matrix& x, const Matrix& mask) {
  for (Index i = 0; i < x.size(); ++i) x.data()[i] *= mask.data()[i];
}

Matrix mul_mask(const Matrix& x, const Matrix& mask) {
  Matrix out = x;
  mul_mask_inplace(out, mask);
  return out;
}

// Adds a self-loop row per masked pad token at the end of the pattern.
AttnPattern extend_with_pad_loops(AttnPattern pat, Index s_pad) {
  for (Index r = pat.rows; r < s_pad; ++r) {
    pat.cols.push_back(r);
    pat.row_offsets.push_back(static_cast<Index>(pat.cols.size()));
  }
  pat.rows = s_pad;
  return pat;
}

}  // namespace

const char* to_string(Task t) { return t == Task::Node ? "node" : "graph"; }

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Indolent: return "indolent";
    case Strategy::Elastic: return "elastic";
  }
  return "?";
}

void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("w_in", p.w_in);
  fn("b_in", p.b_in);
  fn("deg_in_emb", p.deg_in_emb);
  fn("deg_out_emb", p.deg_out_emb);
  fn("spd_bias", p.spd_bias);
  if (!p.global_token.empty()) fn("global_token", p.global_token);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    LayerParams& lp = p.layers[l];
    std::string pre = "layer" + std::to_string(l) + ".";
    fn(pre + "ln1_scale", lp.ln1_scale);
    fn(pre + "ln1_shift", lp.ln1_shift);
    fn(pre + "w_q", lp.w_q);
    fn(pre + "b_q", lp.b_q);
    fn(pre + "w_k", lp.w_k);
    fn(pre + "b_k", lp.b_k);
    fn(pre + "w_v", lp.w_v);
    fn(pre + "b_v", lp.b_v);
    fn(pre + "w_o", lp.w_o);
    fn(pre + "b_o", lp.b_o);
    fn(pre + "ln2_scale", lp.ln2_scale);
    fn(pre + "ln2_shift", lp.ln2_shift);
    fn(pre + "w_ff1", lp.w_ff1);
    fn(pre + "b_ff1", lp.b_ff1);
    fn(pre + "w_ff2", lp.w_ff2);
    fn(pre + "b_ff2", lp.b_ff2);
  }
  fn("lnf_scale", p.lnf_scale);
  fn("lnf_shift", p.lnf_shift);
  fn("w_cls", p.w_cls);
  fn("b_cls", p.b_cls);
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for_each_tensor(z, [](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

Matrix encode_inputs(const Graph& g, const ModelParams& params) {
  const Index n = g.num_nodes;
  const Index d = params.b_in.cols();
  const Index max_bucket = params.deg_in_emb.rows() - 1;
  const bool has_global = !params.global_token.empty();
  auto din = in_degrees(g);
  auto dout = out_degrees(g);

  Matrix h0(n + (has_global ? 1 : 0), d);
  Matrix proj;
  if (!g.features.empty() && !params.w_in.empty()) {
    if (g.features.cols() != params.w_in.rows()) {
      throw ConfigError("encode_inputs: feature dim does not match input projection");
    }
    proj = matmul(g.features, params.w_in);
  }
  for (Index i = 0; i < n; ++i) {
    Index bi = std::min(din[static_cast<std::size_t>(i)], max_bucket);
    Index bo = std::min(dout[static_cast<std::size_t>(i)], max_bucket);
    for (Index j = 0; j < d; ++j) {
      Real v = params.b_in(0, j) + params.deg_in_emb(bi, j) + params.deg_out_emb(bo, j);
      if (!proj.empty()) v += proj(i, j);
      h0(i, j) = v;
    }
  }
  if (has_global) {
    for (Index j = 0; j < d; ++j) h0(n, j) = params.global_token(0, j);
  }
  return h0;
}

std::vector<Real> build_bias(const SpdTable& spd, const AttnPattern& pattern,
                             const ModelParams& params) {
  std::vector<Real> out(static_cast<std::size_t>(pattern.nnz()));
  std::size_t p = 0;
  for (Index i = 0; i < pattern.rows; ++i) {
    for (Index j : pattern.row_cols(i)) out[p++] = params.spd_bias(0, spd.lookup(i, j));
  }
  return out;
}

Matrix build_bias_dense(const SpdTable& spd, Index n, const ModelParams& params) {
  Matrix out(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) out(i, j) = params.spd_bias(0, spd.lookup(i, j));
  }
  return out;
}

Graph generate_sbm(Index n, Index blocks, Real p_in, Real p_out, std::uint64_t seed,
                   Real noise_std) {
  if (n < 1 || blocks < 1 || blocks > n) throw ConfigError("generate_sbm: bad sizes");
  if (!(p_out >= 0.0 && p_out <= p_in && p_in <= 1.0)) {
    throw ConfigError("generate_sbm: need 0 <= p_out <= p_in <= 1");
  }
  auto bounds = cluster_boundaries(n, blocks);
  std::vector<int> block_of(static_cast<std::size_t>(n));
  for (Index b = 0; b < blocks; ++b) {
    for (Index i = bounds[b]; i < bounds[b + 1]; ++i) block_of[static_cast<std::size_t>(i)] = static_cast<int>(b);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  std::vector<std::pair<Index, Index>> edges;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      Real p = block_of[static_cast<std::size_t>(i)] == block_of[static_cast<std::size_t>(j)] ? p_in : p_out;
      if (u(rng) < p) {
        edges.emplace_back(i, j);
        edges.emplace_back(j, i);
      }
    }
  }
  Graph g = graph_from_edges(n, std::move(edges));
  g.features = Matrix(n, blocks);
  std::normal_distribution<Real> noise(0.0, noise_std);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < blocks; ++j) {
      g.features(i, j) = (j == block_of[static_cast<std::size_t>(i)] ? 1.0 : 0.0) +
                         (noise_std > 0 ? noise(rng) : 0.0);
    }
  }
  g.labels.assign(block_of.begin(), block_of.end());
  return g;
}

// ---------------------------------------------------------------------------
// Trainer

struct Trainer::Tape {
  struct Layer {
    LayerNormCache ln1, ln2;
    Matrix a;         // LN1 output
    Matrix q, k, v;   // token order, full
    Matrix attn_out;  // pre-W_o
    Matrix u;         // pre-GELU
    Matrix gelu_u;
    Matrix b_act;     // LN2 output
    Matrix mask_o, mask_f;       // empty when dropout off
    std::vector<Real> attn_mult; // head-major, empty when off
    std::vector<Real> bias_vals;
  };
  Matrix h0;
  Matrix mask_in;
  std::vector<Layer> layers;
  std::vector<Matrix> h_in;  // input to each layer (pre-LN1), plus final entry = pre-LNf
  LayerNormCache lnf;
  Matrix hf;
  Matrix probs;  // rows filled for loss tokens only
};

Trainer::Trainer(Dataset data, TrainConfig cfg) : data_(std::move(data)), cfg_(cfg) {
  if (data_.graphs.empty()) throw DataError("trainer: empty dataset");
  if (cfg_.hidden_dim < 1 || cfg_.layers < 1 || cfg_.heads < 1) {
    throw ConfigError("trainer: dims must be positive");
  }
  if (cfg_.hidden_dim % cfg_.heads != 0) {
    throw ConfigError("trainer: heads must divide hidden_dim");
  }
  if (cfg_.heads % cfg_.workers != 0) {
    throw ConfigError("trainer: workers must divide heads");
  }
  if (cfg_.dense_period < 1) throw ConfigError("trainer: dense_period must be >= 1");
  if (cfg_.ffn_dim == 0) cfg_.ffn_dim = cfg_.hidden_dim;
  cfg_.task = data_.task;

  feat_dim_ = data_.graphs[0].features.cols();
  num_classes_ = data_.num_classes;
  if (num_classes_ == 0) {
    for (const Graph& g : data_.graphs) {
      if (data_.task == Task::Node) {
        if (static_cast<Index>(g.labels.size()) != g.num_nodes) {
          throw DataError("trainer: node task requires a label per node");
        }
        for (int y : g.labels) num_classes_ = std::max<Index>(num_classes_, y + 1);
      } else {
        if (!g.graph_label) throw DataError("trainer: graph task requires graph labels");
        num_classes_ = std::max<Index>(num_classes_, *g.graph_label + 1);
      }
    }
  }
  if (num_classes_ < 2) throw ConfigError("trainer: need at least two classes");

  // Parameter init; consumption order is fixed by for_each_tensor.
  const Index d = cfg_.hidden_dim;
  std::mt19937_64 rng(mix(cfg_.seed));
  params_.w_in = Matrix(feat_dim_, d);
  params_.b_in = Matrix(1, d);
  params_.deg_in_emb = Matrix(cfg_.max_degree_bucket + 1, d);
  params_.deg_out_emb = Matrix(cfg_.max_degree_bucket + 1, d);
  params_.spd_bias = Matrix(1, cfg_.spd_cap + 2);
  if (data_.task == Task::Graph) params_.global_token = Matrix(1, d);
  params_.layers.resize(static_cast<std::size_t>(cfg_.layers));
  for (LayerParams& lp : params_.layers) {
    lp.ln1_scale = Matrix(1, d);
    lp.ln1_shift = Matrix(1, d);
    lp.w_q = Matrix(d, d);
    lp.b_q = Matrix(1, d);
    lp.w_k = Matrix(d, d);
    lp.b_k = Matrix(1, d);
    lp.w_v = Matrix(d, d);
    lp.b_v = Matrix(1, d);
    lp.w_o = Matrix(d, d);
    lp.b_o = Matrix(1, d);
    lp.ln2_scale = Matrix(1, d);
    lp.ln2_shift = Matrix(1, d);
    lp.w_ff1 = Matrix(d, cfg_.ffn_dim);
    lp.b_ff1 = Matrix(1, cfg_.ffn_dim);
    lp.w_ff2 = Matrix(cfg_.ffn_dim, d);
    lp.b_ff2 = Matrix(1, d);
  }
  params_.lnf_scale = Matrix(1, d);
  params_.lnf_shift = Matrix(1, d);
  params_.w_cls = Matrix(d, num_classes_);
  params_.b_cls = Matrix(1, num_classes_);

  for_each_tensor(params_, [&](const std::string& name, Matrix& m) {
    if (name.find("scale") != std::string::npos) {
      m.fill(1.0);
    } else if (name.find("shift") != std::string::npos || name[0] == 'b' ||
               name.find(".b_") != std::string::npos || name == "spd_bias") {
      m.fill(0.0);
    } else if (name.find("emb") != std::string::npos || name == "global_token") {
      std::normal_distribution<Real> nd(0.0, 0.02);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    } else {
      Real std = 1.0 / std::sqrt(static_cast<Real>(std::max<Index>(1, m.rows())));
      std::normal_distribution<Real> nd(0.0, std);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    }
  });

  build_plans();
  layout_cache_.resize(plans_.size());

  // The tuner tracks F_t/LDR on every run; its threshold only steers
  // elastic auto-tuned runs.
  tuner_ = make_tuner_state(plans_[0].beta_g, cfg_.tuner_delta);
  ledger_ = CommLedger(cfg_.workers);
  layer_ledgers_.assign(static_cast<std::size_t>(cfg_.layers), CommLedger(cfg_.workers));
}

void Trainer::build_plans() {
  const Index P = cfg_.workers;
  for (std::size_t gi = 0; gi < data_.graphs.size(); ++gi) {
    const Graph& g = data_.graphs[gi];
    if (g.num_nodes < 1) throw DataError("trainer: empty graph in dataset");
    SequencePlan plan;
    plan.graph_index = static_cast<Index>(gi);
    plan.deg_in = in_degrees(g);
    plan.deg_out = out_degrees(g);

    if (data_.task == Task::Graph) {
      plan.global_index = g.num_nodes;
      std::vector<std::pair<Index, Index>> edges;
      for (Index u = 0; u < g.num_nodes; ++u) {
        for (Index v : g.neighbors(u)) edges.emplace_back(u, v);
        edges.emplace_back(u, plan.global_index);
        edges.emplace_back(plan.global_index, u);
      }
      plan.attn = add_self_loops(graph_from_edges(g.num_nodes + 1, std::move(edges)));
    } else {
      plan.attn = add_self_loops(g);
    }
    plan.s_real = plan.attn.num_nodes;
    plan.s_pad = ((plan.s_real + P - 1) / P) * P;
    plan.beta_g = density(plan.attn);
    plan.cond = check_conditions(plan.attn, cfg_.layers);
    plan.spd = spd_table(g, static_cast<int>(cfg_.spd_cap));

    Index k = cfg_.cluster_k;
    if (k == 0) k = select_k(cfg_.l2_bytes, cfg_.hidden_dim, cfg_.k_formula_i);
    if (k > plan.s_real) throw ConfigError("trainer: cluster_k exceeds sequence length");
    Index d_b = cfg_.block_dim;
    if (d_b == 0) {
      if (cfg_.db_profile.empty()) throw ConfigError("trainer: block_dim 0 needs a db profile");
      d_b = select_db(cfg_.db_profile);
    }
    cfg_.cluster_k = k;
    cfg_.block_dim = d_b;

    Permutation real_perm = reorder(plan.attn, k, cfg_.seed + gi);
    plan.perm.forward.resize(static_cast<std::size_t>(plan.s_pad));
    plan.perm.inverse.resize(static_cast<std::size_t>(plan.s_pad));
    for (Index t = 0; t < plan.s_real; ++t) plan.perm.forward[t] = real_perm.forward[t];
    for (Index t = plan.s_real; t < plan.s_pad; ++t) plan.perm.forward[t] = t;
    for (Index t = 0; t < plan.s_pad; ++t) plan.perm.inverse[plan.perm.forward[t]] = t;

    // Grid and reformation work on the real layout; masked tokens live past
    // position s_real and only ever attend themselves.
    Graph attn_clean = plan.attn;
    attn_clean.features = Matrix();
    attn_clean.labels.clear();
    plan.attn_exec = permute_graph(attn_clean, real_perm);
    plan.grid = build_cluster_grid(attn_clean, real_perm, k);
    plan.sparse_pattern = extend_with_pad_loops(pattern_from_graph(plan.attn_exec), plan.s_pad);

    // Dense execution pattern: real tokens occupy positions [0, s_real).
    plan.dense_pattern_exec.rows = plan.s_pad;
    plan.dense_pattern_exec.row_offsets.assign(static_cast<std::size_t>(plan.s_pad) + 1, 0);
    for (Index r = 0; r < plan.s_pad; ++r) {
      if (r < plan.s_real) {
        for (Index c = 0; c < plan.s_real; ++c) plan.dense_pattern_exec.cols.push_back(c);
      } else {
        plan.dense_pattern_exec.cols.push_back(r);
      }
      plan.dense_pattern_exec.row_offsets[static_cast<std::size_t>(r) + 1] =
          static_cast<Index>(plan.dense_pattern_exec.cols.size());
    }

    auto bucket_of = [&](Index r, Index c) -> int {
      Index i = plan.perm.inverse[static_cast<std::size_t>(r)];
      Index j = plan.perm.inverse[static_cast<std::size_t>(c)];
      if (i == j) return 0;
      if (i == plan.global_index || j == plan.global_index) return 1;
      if (i >= plan.spd.num_nodes || j >= plan.spd.num_nodes) return plan.spd.unreachable_bucket();
      return plan.spd.lookup(i, j);
    };
    auto fill_buckets = [&](const AttnPattern& pat, std::vector<int>& out) {
      out.resize(static_cast<std::size_t>(pat.nnz()));
      std::size_t p = 0;
      for (Index r = 0; r < pat.rows; ++r) {
        for (Index c : pat.row_cols(r)) out[p++] = bucket_of(r, c);
      }
    };
    fill_buckets(plan.sparse_pattern, plan.sparse_buckets);
    fill_buckets(plan.dense_pattern_exec, plan.dense_buckets);

    plan.shards = partition_sequence(plan.s_real, P, mix(cfg_.seed ^ (0xabcd + gi)));

    if (data_.task == Task::Node) {
      plan.loss_tokens.resize(static_cast<std::size_t>(g.num_nodes));
      std::iota(plan.loss_tokens.begin(), plan.loss_tokens.end(), Index{0});
    } else {
      plan.loss_tokens = {plan.global_index};
    }
    plans_.push_back(std::move(plan));
  }
}

const Trainer::LayoutBundle& Trainer::layout_for(SequencePlan& plan, Real beta_thre) {
  auto& cache = layout_cache_[static_cast<std::size_t>(plan.graph_index)];
  auto it = cache.find(beta_thre);
  if (it == cache.end()) {
    ClusterSparseLayout layout = build_layout(plan.grid, plan.attn_exec, TransferStrategy::Elastic,
                                              beta_thre, plan.beta_g, cfg_.block_dim);
    LayoutBundle bundle;
    bundle.dropped_edges = layout.dropped_edges;
    bundle.pattern = extend_with_pad_loops(std::move(layout.pattern), plan.s_pad);
    bundle.buckets.resize(static_cast<std::size_t>(bundle.pattern.nnz()));
    std::size_t p = 0;
    for (Index r = 0; r < bundle.pattern.rows; ++r) {
      for (Index c : bundle.pattern.row_cols(r)) {
        Index i = plan.perm.inverse[static_cast<std::size_t>(r)];
        Index j = plan.perm.inverse[static_cast<std::size_t>(c)];
        int b;
        if (i == j) {
          b = 0;
        } else if (i == plan.global_index || j == plan.global_index) {
          b = 1;
        } else if (i >= plan.spd.num_nodes || j >= plan.spd.num_nodes) {
          b = plan.spd.unreachable_bucket();
        } else {
          b = plan.spd.lookup(i, j);
        }
        bundle.buckets[p++] = b;
      }
    }
    it = cache.emplace(beta_thre, std::move(bundle)).first;
  }
  return it->second;
}

Trainer::ActivePattern Trainer::resolve_pattern(SequencePlan& plan, ForcedPattern fp,
                                                Real beta_thre) {
  ActivePattern ap;
  switch (fp) {
    case ForcedPattern::Dense:
      ap.pattern = &plan.dense_pattern_exec;
      ap.buckets = plan.dense_buckets;
      break;
    case ForcedPattern::EdgeSparse:
      ap.pattern = &plan.sparse_pattern;
      ap.buckets = plan.sparse_buckets;
      break;
    case ForcedPattern::ClusterSparse: {
      const LayoutBundle& bundle = layout_for(plan, beta_thre);
      ap.pattern = &bundle.pattern;
      ap.buckets = bundle.buckets;
      ap.dropped_edges = bundle.dropped_edges;
      break;
    }
    case ForcedPattern::Auto:
      throw ConfigError("resolve_pattern: Auto must be resolved by the caller");
  }
  return ap;
}

Real Trainer::forward(const SequencePlan& plan, const ActivePattern& ap, bool training,
                      std::mt19937_64* dropout_rng, Tape* tape, CommLedger* ledger,
                      MacCounter* macs) {
  const Index s = plan.s_pad;
  const Index d = cfg_.hidden_dim;
  const Graph& g = data_.graphs[static_cast<std::size_t>(plan.graph_index)];

  Matrix h(s, d);
  {
    Matrix h0 = encode_inputs(g, params_);
    for (Index i = 0; i < h0.rows(); ++i) {
      std::copy(h0.row(i).begin(), h0.row(i).end(), h.row(i).begin());
    }
  }
  if (training && cfg_.dropout_input > 0) {
    Matrix mask = draw_mask(s, d, cfg_.dropout_input, *dropout_rng);
    mul_mask_inplace(h, mask);
    if (tape) tape->mask_in = std::move(mask);
  }
  if (tape) {
    tape->h0 = h;
    tape->layers.resize(static_cast<std::size_t>(cfg_.layers));
    tape->h_in.clear();
  }

  std::vector<Real> bias_vals(ap.buckets.size());
  for (std::size_t p = 0; p < ap.buckets.size(); ++p) {
    bias_vals[p] = params_.spd_bias(0, ap.buckets[p]);
  }

  std::vector<WorkerShard> shards = plan.shards;
  const Index rows_per = s / cfg_.workers;

  for (Index l = 0; l < cfg_.layers; ++l) {
    const LayerParams& lp = params_.layers[static_cast<std::size_t>(l)];
    Tape::Layer* tl = tape ? &tape->layers[static_cast<std::size_t>(l)] : nullptr;
    if (tape) tape->h_in.push_back(h);

    LayerNormCache ln1;
    Matrix a = layer_norm_rows(h, lp.ln1_scale, lp.ln1_shift, ln1);
    Matrix q = affine(a, lp.w_q, lp.b_q);
    Matrix k = affine(a, lp.w_k, lp.b_k);
    Matrix v = affine(a, lp.w_v, lp.b_v);

    for (Index w = 0; w < cfg_.workers; ++w) {
      WorkerShard& sh = shards[static_cast<std::size_t>(w)];
      sh.q_sub = Matrix(rows_per, d);
      sh.k_sub = Matrix(rows_per, d);
      sh.v_sub = Matrix(rows_per, d);
      for (Index r = 0; r < rows_per; ++r) {
        Index t = sh.token_ids[static_cast<std::size_t>(r)];
        std::copy(q.row(t).begin(), q.row(t).end(), sh.q_sub.row(r).begin());
        std::copy(k.row(t).begin(), k.row(t).end(), sh.k_sub.row(r).begin());
        std::copy(v.row(t).begin(), v.row(t).end(), sh.v_sub.row(r).begin());
      }
    }

    std::vector<Real> attn_mult;
    if (training && cfg_.dropout_attn > 0) {
      attn_mult = draw_mask_vec(static_cast<std::size_t>(cfg_.heads * ap.pattern->nnz()),
                                cfg_.dropout_attn, *dropout_rng);
    }

    CommLedger layer_led(cfg_.workers);
    DistAttnResult dist = run_distributed_layer(shards, *ap.pattern, plan.perm, cfg_.heads,
                                                bias_vals, attn_mult, layer_led);
    if (ledger) {
      ledger->accumulate(layer_led);
      layer_ledgers_[static_cast<std::size_t>(l)].accumulate(layer_led);
    }
    if (macs) *macs += dist.macs;

    Matrix attn_out(s, d);
    for (Index w = 0; w < cfg_.workers; ++w) {
      const Matrix& os = dist.out_shards[static_cast<std::size_t>(w)];
      for (Index r = 0; r < rows_per; ++r) {
        Index t = shards[static_cast<std::size_t>(w)].token_ids[static_cast<std::size_t>(r)];
        std::copy(os.row(r).begin(), os.row(r).end(), attn_out.row(t).begin());
      }
    }

    Matrix o = affine(attn_out, lp.w_o, lp.b_o);
    Matrix mask_o;
    if (training && cfg_.dropout_other > 0) {
      mask_o = draw_mask(s, d, cfg_.dropout_other, *dropout_rng);
      mul_mask_inplace(o, mask_o);
    }
    add_inplace(h, o);

    LayerNormCache ln2;
    Matrix b_act = layer_norm_rows(h, lp.ln2_scale, lp.ln2_shift, ln2);
    Matrix u = affine(b_act, lp.w_ff1, lp.b_ff1);
    Matrix gelu_u(u.rows(), u.cols());
    for (Index i = 0; i < u.size(); ++i) gelu_u.data()[i] = gelu(u.data()[i]);
    Matrix f = affine(gelu_u, lp.w_ff2, lp.b_ff2);
    Matrix mask_f;
    if (training && cfg_.dropout_other > 0) {
      mask_f = draw_mask(s, d, cfg_.dropout_other, *dropout_rng);
      mul_mask_inplace(f, mask_f);
    }
    add_inplace(h, f);

    if (tl) {
      tl->ln1 = std::move(ln1);
      tl->a = std::move(a);
      tl->q = std::move(q);
      tl->k = std::move(k);
      tl->v = std::move(v);
      tl->attn_out = std::move(attn_out);
      tl->ln2 = std::move(ln2);
      tl->b_act = std::move(b_act);
      tl->u = std::move(u);
      tl->gelu_u = std::move(gelu_u);
      tl->mask_o = std::move(mask_o);
      tl->mask_f = std::move(mask_f);
      tl->attn_mult = std::move(attn_mult);
      tl->bias_vals = bias_vals;
    }
  }

  if (tape) tape->h_in.push_back(h);
  LayerNormCache lnf;
  Matrix hf = layer_norm_rows(h, params_.lnf_scale, params_.lnf_shift, lnf);
  Matrix logits = affine(hf, params_.w_cls, params_.b_cls);

  Real loss = 0;
  Matrix probs(s, num_classes_);
  for (Index t : plan.loss_tokens) {
    int label = data_.task == Task::Node
                    ? g.labels[static_cast<std::size_t>(t)]
                    : *g.graph_label;
    if (label < 0 || label >= num_classes_) throw DataError("trainer: label out of range");
    auto row = logits.row(t);
    Real mx = *std::max_element(row.begin(), row.end());
    Real denom = 0;
    for (Real x : row) denom += std::exp(x - mx);
    Real logp = row[static_cast<std::size_t>(label)] - mx - std::log(denom);
    loss -= logp;
    for (Index c = 0; c < num_classes_; ++c) {
      probs(t, c) = std::exp(row[static_cast<std::size_t>(c)] - mx) / denom;
    }
  }
  loss /= static_cast<Real>(plan.loss_tokens.size());

  if (tape) {
    tape->lnf = std::move(lnf);
    tape->hf = std::move(hf);
    tape->probs = std::move(probs);
  }
  return loss;
}

void Trainer::backward(const SequencePlan& plan, const ActivePattern& ap, const Tape& tape,
                       ModelParams& grads) {
  const Index s = plan.s_pad;
  const Index d = cfg_.hidden_dim;
  const Graph& g = data_.graphs[static_cast<std::size_t>(plan.graph_index)];
  const Real inv_count = 1.0 / static_cast<Real>(plan.loss_tokens.size());

  Matrix dlogits(s, num_classes_);
  for (Index t : plan.loss_tokens) {
    int label = data_.task == Task::Node ? g.labels[static_cast<std::size_t>(t)] : *g.graph_label;
    for (Index c = 0; c < num_classes_; ++c) {
      dlogits(t, c) = (tape.probs(t, c) - (c == label ? 1.0 : 0.0)) * inv_count;
    }
  }

  Matrix dhf = matmul_nt(dlogits, params_.w_cls);
  add_inplace(grads.w_cls, matmul_tn(tape.hf, dlogits));
  accumulate_bias_grad(dlogits, grads.b_cls);

  Matrix dh = layer_norm_rows_backward(dhf, tape.lnf, params_.lnf_scale, grads.lnf_scale,
                                  grads.lnf_shift);

  for (Index l = cfg_.layers - 1; l >= 0; --l) {
    const LayerParams& lp = params_.layers[static_cast<std::size_t>(l)];
    LayerParams& gl = grads.layers[static_cast<std::size_t>(l)];
    const Tape::Layer& tl = tape.layers[static_cast<std::size_t>(l)];

    // Second residual: h_out = h_mid + drop(FFN(LN2(h_mid)))
    Matrix df = tl.mask_f.empty() ? dh : mul_mask(dh, tl.mask_f);
    add_inplace(gl.w_ff2, matmul_tn(tl.gelu_u, df));
    accumulate_bias_grad(df, gl.b_ff2);
    Matrix dgelu = matmul_nt(df, lp.w_ff2);
    Matrix du(s, cfg_.ffn_dim);
    for (Index i = 0; i < du.size(); ++i) {
      du.data()[i] = dgelu.data()[i] * gelu_grad(tl.u.data()[i]);
    }
    add_inplace(gl.w_ff1, matmul_tn(tl.b_act, du));
    accumulate_bias_grad(du, gl.b_ff1);
    Matrix db_act = matmul_nt(du, lp.w_ff1);
    Matrix dh_mid_ln = layer_norm_rows_backward(db_act, tl.ln2, lp.ln2_scale, gl.ln2_scale,
                                           gl.ln2_shift);
    add_inplace(dh, dh_mid_ln);

    // First residual: h_mid = h_in + drop(W_o(attn))
    Matrix do_ = tl.mask_o.empty() ? dh : mul_mask(dh, tl.mask_o);
    add_inplace(gl.w_o, matmul_tn(tl.attn_out, do_));
    accumulate_bias_grad(do_, gl.b_o);
    Matrix dattn = matmul_nt(do_, lp.w_o);

    // Distributed attention backward: shard Q/K/V and the upstream grad.
    std::vector<WorkerShard> shards = plan.shards;
    const Index rows_per = s / cfg_.workers;
    std::vector<Matrix> up_shards(static_cast<std::size_t>(cfg_.workers),
                                  Matrix(rows_per, d));
    for (Index w = 0; w < cfg_.workers; ++w) {
      WorkerShard& sh = shards[static_cast<std::size_t>(w)];
      sh.q_sub = Matrix(rows_per, d);
      sh.k_sub = Matrix(rows_per, d);
      sh.v_sub = Matrix(rows_per, d);
      Matrix& up = up_shards[static_cast<std::size_t>(w)];
      for (Index r = 0; r < rows_per; ++r) {
        Index t = sh.token_ids[static_cast<std::size_t>(r)];
        std::copy(tl.q.row(t).begin(), tl.q.row(t).end(), sh.q_sub.row(r).begin());
        std::copy(tl.k.row(t).begin(), tl.k.row(t).end(), sh.k_sub.row(r).begin());
        std::copy(tl.v.row(t).begin(), tl.v.row(t).end(), sh.v_sub.row(r).begin());
        std::copy(dattn.row(t).begin(), dattn.row(t).end(), up.row(r).begin());
      }
    }
    DistAttnGrads dg = run_distributed_layer_backward(shards, *ap.pattern, plan.perm, cfg_.heads,
                                                      tl.bias_vals, tl.attn_mult, up_shards);
    for (std::size_t p = 0; p < dg.dbias.size(); ++p) {
      grads.spd_bias(0, ap.buckets[p]) += dg.dbias[p];
    }
    Matrix dq(s, d), dk(s, d), dv(s, d);
    for (Index w = 0; w < cfg_.workers; ++w) {
      const auto& ids = shards[static_cast<std::size_t>(w)].token_ids;
      for (Index r = 0; r < rows_per; ++r) {
        Index t = ids[static_cast<std::size_t>(r)];
        std::copy(dg.dq_sub[static_cast<std::size_t>(w)].row(r).begin(),
                  dg.dq_sub[static_cast<std::size_t>(w)].row(r).end(), dq.row(t).begin());
        std::copy(dg.dk_sub[static_cast<std::size_t>(w)].row(r).begin(),
                  dg.dk_sub[static_cast<std::size_t>(w)].row(r).end(), dk.row(t).begin());
        std::copy(dg.dv_sub[static_cast<std::size_t>(w)].row(r).begin(),
                  dg.dv_sub[static_cast<std::size_t>(w)].row(r).end(), dv.row(t).begin());
      }
    }
    add_inplace(gl.w_q, matmul_tn(tl.a, dq));
    accumulate_bias_grad(dq, gl.b_q);
    add_inplace(gl.w_k, matmul_tn(tl.a, dk));
    accumulate_bias_grad(dk, gl.b_k);
    add_inplace(gl.w_v, matmul_tn(tl.a, dv));
    accumulate_bias_grad(dv, gl.b_v);
    Matrix da = matmul_nt(dq, lp.w_q);
    add_inplace(da, matmul_nt(dk, lp.w_k));
    add_inplace(da, matmul_nt(dv, lp.w_v));
    Matrix dh_in_ln = layer_norm_rows_backward(da, tl.ln1, lp.ln1_scale, gl.ln1_scale, gl.ln1_shift);
    add_inplace(dh, dh_in_ln);
  }

  if (!tape.mask_in.empty()) mul_mask_inplace(dh, tape.mask_in);

  // Input encoding gradients over the real rows.
  const Index n = g.num_nodes;
  const Index max_bucket = cfg_.max_degree_bucket;
  if (feat_dim_ > 0) {
    Matrix dh_real(n, d);
    for (Index i = 0; i < n; ++i) {
      std::copy(dh.row(i).begin(), dh.row(i).end(), dh_real.row(i).begin());
    }
    add_inplace(grads.w_in, matmul_tn(g.features, dh_real));
  }
  for (Index i = 0; i < n; ++i) {
    Index bi = std::min(plan.deg_in[static_cast<std::size_t>(i)], max_bucket);
    Index bo = std::min(plan.deg_out[static_cast<std::size_t>(i)], max_bucket);
    for (Index j = 0; j < d; ++j) {
      Real v = dh(i, j);
      grads.b_in(0, j) += v;
      grads.deg_in_emb(bi, j) += v;
      grads.deg_out_emb(bo, j) += v;
    }
  }
  if (plan.global_index >= 0) {
    for (Index j = 0; j < d; ++j) grads.global_token(0, j) += dh(plan.global_index, j);
  }
}

void Trainer::sgd_step(ModelParams& grads, Real lr) {
  if (cfg_.momentum > 0 && !velocity_init_) {
    velocity_ = zeros_like(params_);
    velocity_init_ = true;
  }
  std::vector<Matrix*> gs;
  for_each_tensor(grads, [&](const std::string&, Matrix& m) { gs.push_back(&m); });
  std::size_t i = 0;
  if (cfg_.momentum > 0) {
    std::vector<Matrix*> vs;
    for_each_tensor(velocity_, [&](const std::string&, Matrix& m) { vs.push_back(&m); });
    for_each_tensor(params_, [&](const std::string&, Matrix& m) {
      Matrix& v = *vs[i];
      const Matrix& gr = *gs[i];
      for (Index e = 0; e < m.size(); ++e) {
        v.data()[e] = cfg_.momentum * v.data()[e] + gr.data()[e];
        m.data()[e] -= lr * v.data()[e];
      }
      ++i;
    });
  } else {
    for_each_tensor(params_, [&](const std::string&, Matrix& m) {
      axpy_inplace(m, -lr, *gs[i]);
      ++i;
    });
  }
}

Real Trainer::lr_at(Index epoch) const {
  Real frac = static_cast<Real>(epoch - 1) / static_cast<Real>(std::max<Index>(1, cfg_.epochs));
  return cfg_.lr_end + (cfg_.lr_start - cfg_.lr_end) * std::pow(1.0 - frac, cfg_.lr_power);
}

EpochStats Trainer::train_epoch() {
  ++epoch_;
  auto t0 = std::chrono::steady_clock::now();
  ledger_.reset();
  for (CommLedger& led : layer_ledgers_) led.reset();

  EpochStats st;
  st.epoch = epoch_;
  MacCounter macs;
  Real loss_sum = 0;

  for (std::size_t si = 0; si < plans_.size(); ++si) {
    SequencePlan& plan = plans_[si];
    AttentionMode mode = select_mode(plan.cond, epoch_, cfg_.dense_period);
    Real theta = 0;
    if (cfg_.strategy == Strategy::Indolent) {
      theta = plan.beta_g;
    } else if (cfg_.strategy == Strategy::Elastic) {
      theta = cfg_.auto_tune ? tuner_.beta_thre()
              : cfg_.beta_thre_override >= 0
                  ? cfg_.beta_thre_override
                  : std::min(5.0 * plan.beta_g, 1.0);
    }
    ForcedPattern fp;
    if (mode.mode == Mode::Dense) {
      fp = ForcedPattern::Dense;
    } else if (cfg_.strategy == Strategy::None) {
      fp = ForcedPattern::EdgeSparse;
    } else {
      fp = ForcedPattern::ClusterSparse;
    }
    if (si == 0) {
      st.mode = mode.mode;
      st.reason = mode.reason;
      st.beta_thre = theta;
    }

    ActivePattern ap = resolve_pattern(plan, fp, theta);
    std::mt19937_64 drop_rng(mix(cfg_.seed ^ (0x9e3779b9ULL * static_cast<std::uint64_t>(epoch_) +
                                              static_cast<std::uint64_t>(si))));
    Tape tape;
    Real loss;
    try {
      loss = forward(plan, ap, true, &drop_rng, &tape, &ledger_, &macs);
    } catch (const DataError& e) {
      // Inputs were validated at construction; a data-level failure here
      // means the numeric state blew up (overflow reached the kernels).
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch_) + ": " +
                            e.what());
    }
    if (!std::isfinite(loss)) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch_) +
                            " (non-finite loss)");
    }
    ModelParams grads = zeros_like(params_);
    backward(plan, ap, tape, grads);
    sgd_step(grads, lr_at(epoch_));
    loss_sum += loss;
    st.dropped_edges += ap.dropped_edges;
  }

  st.loss = loss_sum / static_cast<Real>(plans_.size());
  auto t1 = std::chrono::steady_clock::now();
  st.epoch_time_s = std::chrono::duration<Real>(t1 - t0).count();

  Real tuner_time = cfg_.tuner_wall_clock ? std::max(st.epoch_time_s, 1e-9) : 1.0;
  tuner_update(tuner_, st.loss, tuner_time, epoch_ - 1);
  st.avg_loss = tuner_.avg_loss;
  st.ldr = tuner_.ldr_history.back().second;

  for (const auto& e : ledger_.workers) {
    st.comm_elements += e.qkv_gather + e.output_scatter;
  }
  st.score_macs = macs.score_macs;
  if (cfg_.eval_each_epoch) st.accuracy = evaluate();
  history_.push_back(st);
  return st;
}

Real Trainer::evaluate() {
  Index correct = 0, total = 0;
  for (std::size_t si = 0; si < plans_.size(); ++si) {
    SequencePlan& plan = plans_[si];
    ForcedPattern fp = cfg_.eval_pattern;
    if (fp == ForcedPattern::Auto) {
      fp = plan.cond.all_pass() ? ForcedPattern::EdgeSparse : ForcedPattern::Dense;
    }
    Real theta = fp == ForcedPattern::ClusterSparse ? std::min(5.0 * plan.beta_g, 1.0) : 0.0;
    ActivePattern ap = resolve_pattern(plan, fp, theta);

    const Graph& g = data_.graphs[static_cast<std::size_t>(plan.graph_index)];
    Tape tape;
    forward(plan, ap, false, nullptr, &tape, nullptr, nullptr);
    for (Index t : plan.loss_tokens) {
      int label = data_.task == Task::Node ? g.labels[static_cast<std::size_t>(t)]
                                           : *g.graph_label;
      Index best = 0;
      for (Index c = 1; c < num_classes_; ++c) {
        if (tape.probs(t, c) > tape.probs(t, best)) best = c;
      }
      if (best == label) ++correct;
      ++total;
    }
  }
  if (total == 0) throw DataError("evaluate: empty evaluation set");
  return static_cast<Real>(correct) / static_cast<Real>(total);
}

Real Trainer::forward_loss(ForcedPattern fp, std::size_t seq) {
  SequencePlan& plan = plans_.at(seq);
  if (fp == ForcedPattern::Auto) fp = ForcedPattern::EdgeSparse;
  Real theta = fp == ForcedPattern::ClusterSparse ? std::min(5.0 * plan.beta_g, 1.0) : 0.0;
  ActivePattern ap = resolve_pattern(plan, fp, theta);
  return forward(plan, ap, false, nullptr, nullptr, nullptr, nullptr);
}

Real Trainer::forward_backward(ForcedPattern fp, ModelParams& grads_out, std::size_t seq) {
  SequencePlan& plan = plans_.at(seq);
  if (fp == ForcedPattern::Auto) fp = ForcedPattern::EdgeSparse;
  Real theta = fp == ForcedPattern::ClusterSparse ? std::min(5.0 * plan.beta_g, 1.0) : 0.0;
  ActivePattern ap = resolve_pattern(plan, fp, theta);
  Tape tape;
  Real loss = forward(plan, ap, false, nullptr, &tape, nullptr, nullptr);
  grads_out = zeros_like(params_);
  backward(plan, ap, tape, grads_out);
  return loss;
}

}  // namespace gte
