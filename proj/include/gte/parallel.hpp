#pragma once

#include <span>
#include <vector>

#include "gte/attention.hpp"
#include "gte/interleave.hpp"
#include "gte/partition.hpp"
#include "gte/reformation.hpp"
#include "gte/types.hpp"

namespace gte {

// Logical worker state: the token rows it owns plus their Q/K/V projections.
struct WorkerShard {
  Index worker_id = 0;
  std::vector<Index> token_ids;  // disjoint across workers, cover [0, S_pad)
  Matrix q_sub, k_sub, v_sub;    // rows align with token_ids
};

// Exact per-worker element counts for the two collectives. The *_gather /
// *_scatter columns count every element a worker sends including its
// self-addressed chunk (this is what the 4Sd/P contract measures); the
// *_cross columns count only cross-worker traffic.
struct CommLedger {
  struct Entry {
    std::int64_t qkv_gather = 0;
    std::int64_t qkv_gather_cross = 0;
    std::int64_t output_scatter = 0;
    std::int64_t output_scatter_cross = 0;
    std::int64_t bias_exchange = 0;
  };
  std::vector<Entry> workers;

  explicit CommLedger(Index num_workers = 0) : workers(static_cast<std::size_t>(num_workers)) {}
  void reset() { workers.assign(workers.size(), {}); }
  void accumulate(const CommLedger& other);
  std::int64_t transport_elements(Index w) const {
    return workers[static_cast<std::size_t>(w)].qkv_gather +
           workers[static_cast<std::size_t>(w)].output_scatter;
  }
};

// Pads the sequence to a multiple of P with masked tokens (ids >= seq_len),
// shuffles token ids with the seed, then splits contiguously.
std::vector<WorkerShard> partition_sequence(Index seq_len, Index num_workers, std::uint64_t seed);

// Gathers the sequence dimension and splits the head/feature dimension:
// per-worker [rows_w x d] -> per-worker [S x d/P] where worker p keeps
// columns [p*d/P, (p+1)*d/P). Output rows are indexed by token id.
std::vector<Matrix> all_to_all_seq_to_head(const std::vector<Matrix>& shard_mats,
                                           std::span<const std::vector<Index>> token_ids,
                                           Index num_heads, CommLedger* ledger, bool count_as_qkv);

// Inverse exchange: per-worker [S x d/P] -> per-worker [rows_w x d].
std::vector<Matrix> all_to_all_head_to_seq(const std::vector<Matrix>& head_slices,
                                           std::span<const std::vector<Index>> token_ids,
                                           CommLedger* ledger, bool count_as_scatter);

// The attention sublayer, distributed: gather, apply the cluster permutation,
// run the kernel per head slice, invert the permutation, scatter. bias and
// weight_mult are per-pattern-pair, weight_mult head-major [H * nnz].
// Results are independent of P.
struct DistAttnResult {
  std::vector<Matrix> out_shards;  // per worker, [rows_w x d]
  MacCounter macs;
};

DistAttnResult run_distributed_layer(const std::vector<WorkerShard>& shards,
                                     const AttnPattern& pattern, const Permutation& perm,
                                     Index num_heads, std::span<const Real> bias,
                                     std::span<const Real> weight_mult, CommLedger& ledger);

// Mode-level entry: Dense runs the all-pairs pattern, Sparse the graph's
// pattern (g_exec, in execution coordinates), cluster layouts theirs.
DistAttnResult run_distributed_layer(const std::vector<WorkerShard>& shards, const Graph* g_exec,
                                     AttentionMode mode, const ClusterSparseLayout* layout,
                                     const Permutation& perm, Index num_heads, CommLedger& ledger);

struct DistAttnGrads {
  std::vector<Matrix> dq_sub, dk_sub, dv_sub;  // per worker, [rows_w x d]
  std::vector<Real> dbias;                     // per pattern pair
};

// Mirrors the forward exchanges on gradients; backward traffic is not
// tallied (the ledger tracks the forward-pass contract).
DistAttnGrads run_distributed_layer_backward(const std::vector<WorkerShard>& shards,
                                             const AttnPattern& pattern, const Permutation& perm,
                                             Index num_heads, std::span<const Real> bias,
                                             std::span<const Real> weight_mult,
                                             const std::vector<Matrix>& upstream_shards);

}  // namespace gte
