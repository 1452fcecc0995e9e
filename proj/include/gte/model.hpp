#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gte/attention.hpp"
#include "gte/graph.hpp"
#include "gte/interleave.hpp"
#include "gte/parallel.hpp"
#include "gte/partition.hpp"
#include "gte/reformation.hpp"
#include "gte/types.hpp"

namespace gte {

enum class Task { Node, Graph };
enum class Strategy { None, Indolent, Elastic };
enum class ForcedPattern { Auto, Dense, EdgeSparse, ClusterSparse };

struct TrainConfig {
  Index layers = 2;
  Index hidden_dim = 64;
  Index heads = 8;
  Index ffn_dim = 0;  // 0 -> hidden_dim
  Real lr_start = 2e-4;
  Real lr_end = 1e-9;
  Real lr_power = 1.0;
  Real momentum = 0.0;
  Real dropout_attn = 0.5;
  Real dropout_input = 0.1;
  Real dropout_other = 0.3;
  Index dense_period = 10;
  Strategy strategy = Strategy::None;
  bool auto_tune = true;        // elastic only
  Real beta_thre_override = -1; // <0 -> 5*beta_G for non-tuned elastic runs
  Index cluster_k = 0;          // 0 -> select_k
  Index block_dim = 16;         // d_b; 0 -> select_db(db_profile)
  std::int64_t l2_bytes = 6291456;
  Index k_formula_i = 1536;
  std::map<Index, Real> db_profile;
  Index spd_cap = 8;
  Index max_degree_bucket = 512;
  Index workers = 1;
  std::uint64_t seed = 1;
  Index epochs = 10;
  Index tuner_delta = 10;
  bool tuner_wall_clock = false;  // false: LDR uses a fixed 1s epoch time
  Index num_classes = 0;          // 0 -> inferred from labels
  Task task = Task::Node;
  ForcedPattern eval_pattern = ForcedPattern::Dense;
  bool eval_each_epoch = true;
};

struct LayerParams {
  Matrix ln1_scale, ln1_shift;
  Matrix w_q, b_q, w_k, b_k, w_v, b_v;
  Matrix w_o, b_o;
  Matrix ln2_scale, ln2_shift;
  Matrix w_ff1, b_ff1, w_ff2, b_ff2;
};

struct ModelParams {
  Matrix w_in, b_in;
  Matrix deg_in_emb, deg_out_emb;  // (max_degree_bucket+1) x d
  Matrix spd_bias;                 // 1 x (spd_cap+2), shared across layers
  Matrix global_token;             // 1 x d; empty for node tasks
  std::vector<LayerParams> layers;
  Matrix lnf_scale, lnf_shift;
  Matrix w_cls, b_cls;
};

void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, Matrix&)>& fn);
ModelParams zeros_like(const ModelParams& p);

// h_i = x_i W_in + b_in + z_in[deg_in(i)] + z_out[deg_out(i)], degrees from
// the directed input graph, buckets clamped. Appends the global-token row
// when the model has one.
Matrix encode_inputs(const Graph& g, const ModelParams& params);

// Per-pair SPD bias values b[phi(i, j)] for pairs of real nodes.
std::vector<Real> build_bias(const SpdTable& spd, const AttnPattern& pattern,
                             const ModelParams& params);
Matrix build_bias_dense(const SpdTable& spd, Index n, const ModelParams& params);

// Planted-partition graph: near-equal contiguous blocks, both arcs emitted
// per sampled undirected edge, labels = block ids, features = one-hot block
// prototype plus N(0, noise_std) noise.
Graph generate_sbm(Index n, Index blocks, Real p_in, Real p_out, std::uint64_t seed,
                   Real noise_std = 0.1);

struct Dataset {
  Task task = Task::Node;
  std::vector<Graph> graphs;
  Index num_classes = 0;  // 0 -> inferred
};

struct EpochStats {
  Index epoch = 0;  // 1-based
  Mode mode = Mode::Dense;
  ModeReason reason = ModeReason::ScheduledDense;
  Real beta_thre = 0;
  Real loss = 0;
  Real avg_loss = 0;  // tuner F_t
  Real ldr = 0;
  Real epoch_time_s = 0;
  Real accuracy = -1;  // -1 when not evaluated
  std::int64_t dropped_edges = 0;
  std::int64_t comm_elements = 0;
  std::int64_t score_macs = 0;
};

// Everything static the training loop needs for one sequence.
struct SequencePlan {
  Index graph_index = 0;
  Index s_real = 0;  // N (+1 for the global token)
  Index s_pad = 0;
  Index global_index = -1;
  std::vector<Index> deg_in, deg_out;
  Graph attn;  // self-looped attention graph over s_real
  Real beta_g = 0;
  ConditionReport cond;
  SpdTable spd;       // over the original N nodes
  Permutation perm;   // over s_pad: cluster order, identity tail for pads
  ClusterGrid grid;   // over the real (unpadded) permuted attention layout
  Graph attn_exec;    // real attention graph in execution coordinates
  AttnPattern sparse_pattern;      // extended with pad self-loops
  AttnPattern dense_pattern_exec;  // all real pairs + pad self-loops
  std::vector<int> sparse_buckets, dense_buckets;
  std::vector<WorkerShard> shards;
  std::vector<Index> loss_tokens;
};

class Trainer {
 public:
  Trainer(Dataset data, TrainConfig cfg);

  EpochStats train_epoch();
  Real evaluate();

  const ModelParams& params() const { return params_; }
  ModelParams& mutable_params() { return params_; }
  const TunerState& tuner() const { return tuner_; }
  const CommLedger& ledger() const { return ledger_; }
  // Last epoch's collectives broken down per transformer layer.
  const std::vector<CommLedger>& layer_ledgers() const { return layer_ledgers_; }
  const std::vector<EpochStats>& history() const { return history_; }
  const SequencePlan& plan(std::size_t i = 0) const { return plans_[i]; }
  const TrainConfig& config() const { return cfg_; }
  Index num_classes() const { return num_classes_; }

  // Test hooks: dropout-free loss / gradients under a pinned pattern.
  Real forward_loss(ForcedPattern fp, std::size_t seq = 0);
  Real forward_backward(ForcedPattern fp, ModelParams& grads_out, std::size_t seq = 0);

 private:
  struct ActivePattern {
    const AttnPattern* pattern = nullptr;
    std::span<const int> buckets;
    std::int64_t dropped_edges = 0;
  };

  // A cluster-sparse layout prepared for execution: the reformed pattern
  // extended with pad self-loops, plus per-pair bias buckets.
  struct LayoutBundle {
    AttnPattern pattern;
    std::vector<int> buckets;
    std::int64_t dropped_edges = 0;
  };

  struct Tape;  // defined in model.cpp

  void build_plans();
  ActivePattern resolve_pattern(SequencePlan& plan, ForcedPattern fp, Real beta_thre);
  const LayoutBundle& layout_for(SequencePlan& plan, Real beta_thre);
  Real forward(const SequencePlan& plan, const ActivePattern& ap, bool training,
               std::mt19937_64* dropout_rng, Tape* tape, CommLedger* ledger,
               MacCounter* macs);
  void backward(const SequencePlan& plan, const ActivePattern& ap, const Tape& tape,
                ModelParams& grads);
  void sgd_step(ModelParams& grads, Real lr);
  Real lr_at(Index epoch) const;

  Dataset data_;
  TrainConfig cfg_;
  Index num_classes_ = 0;
  Index feat_dim_ = 0;
  ModelParams params_;
  ModelParams velocity_;
  bool velocity_init_ = false;
  std::vector<SequencePlan> plans_;
  // Layout cache per (sequence, threshold); rebuilt only when the tuner moves.
  std::vector<std::map<Real, LayoutBundle>> layout_cache_;
  TunerState tuner_;
  CommLedger ledger_;
  std::vector<CommLedger> layer_ledgers_;
  std::vector<EpochStats> history_;
  Index epoch_ = 0;  // last finished epoch, 1-based
};

const char* to_string(Task t);
const char* to_string(Strategy s);

}  // namespace gte
