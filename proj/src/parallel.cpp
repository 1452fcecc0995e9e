#include "gte/parallel.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace gte {

namespace {

struct ShardShape {
  Index num_workers = 0;
  Index rows = 0;   // rows per shard
  Index d = 0;
  Index total = 0;  // padded sequence length
};

ShardShape validate_shards(const std::vector<Matrix>& mats,
                           std::span<const std::vector<Index>> token_ids) {
  if (mats.empty() || mats.size() != token_ids.size()) {
    throw ConfigError("all_to_all: shard count mismatch");
  }
  ShardShape s;
  s.num_workers = static_cast<Index>(mats.size());
  s.rows = mats[0].rows();
  s.d = mats[0].cols();
  for (std::size_t w = 0; w < mats.size(); ++w) {
    if (mats[w].rows() != s.rows || mats[w].cols() != s.d) {
      throw ConfigError("all_to_all: ragged shards");
    }
    if (static_cast<Index>(token_ids[w].size()) != s.rows) {
      throw ConfigError("all_to_all: token ids misaligned with shard rows");
    }
  }
  s.total = s.rows * s.num_workers;
  return s;
}

void check_divisibility(Index d, Index num_heads, Index num_workers) {
  if (num_heads % num_workers != 0) {
    throw ConfigError("all_to_all: head count not divisible by worker count");
  }
  if (d % num_heads != 0) {
    throw ConfigError("all_to_all: hidden dim not divisible by head count");
  }
}

Matrix permute_rows(const Matrix& m, const Permutation& perm) {
  Matrix out(m.rows(), m.cols());
  for (Index r = 0; r < m.rows(); ++r) {
    auto src = m.row(perm.inverse[static_cast<std::size_t>(r)]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

Matrix unpermute_rows(const Matrix& m, const Permutation& perm) {
  Matrix out(m.rows(), m.cols());
  for (Index t = 0; t < m.rows(); ++t) {
    auto src = m.row(perm.forward[static_cast<std::size_t>(t)]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

Matrix slice_cols(const Matrix& m, Index c0, Index c1) {
  Matrix out(m.rows(), c1 - c0);
  for (Index r = 0; r < m.rows(); ++r) {
    const Real* src = m.data() + r * m.cols() + c0;
    std::copy(src, src + (c1 - c0), out.row(r).begin());
  }
  return out;
}

void place_cols(Matrix& dst, const Matrix& src, Index c0) {
  for (Index r = 0; r < src.rows(); ++r) {
    std::copy(src.row(r).begin(), src.row(r).end(), dst.data() + r * dst.cols() + c0);
  }
}

}  // namespace

void CommLedger::accumulate(const CommLedger& other) {
  if (workers.size() != other.workers.size()) {
    throw ConfigError("ledger: worker count mismatch");
  }
  for (std::size_t w = 0; w < workers.size(); ++w) {
    workers[w].qkv_gather += other.workers[w].qkv_gather;
    workers[w].qkv_gather_cross += other.workers[w].qkv_gather_cross;
    workers[w].output_scatter += other.workers[w].output_scatter;
    workers[w].output_scatter_cross += other.workers[w].output_scatter_cross;
    workers[w].bias_exchange += other.workers[w].bias_exchange;
  }
}

std::vector<WorkerShard> partition_sequence(Index seq_len, Index num_workers, std::uint64_t seed) {
  if (num_workers < 1) throw ConfigError("partition_sequence: worker count must be >= 1");
  if (seq_len < 1) throw ConfigError("partition_sequence: empty sequence");
  const Index padded = ((seq_len + num_workers - 1) / num_workers) * num_workers;
  std::vector<Index> ids(static_cast<std::size_t>(padded));
  std::iota(ids.begin(), ids.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  const Index per = padded / num_workers;
  std::vector<WorkerShard> shards(static_cast<std::size_t>(num_workers));
  for (Index w = 0; w < num_workers; ++w) {
    shards[static_cast<std::size_t>(w)].worker_id = w;
    shards[static_cast<std::size_t>(w)].token_ids.assign(ids.begin() + w * per,
                                                         ids.begin() + (w + 1) * per);
  }
  return shards;
}

std::vector<Matrix> all_to_all_seq_to_head(const std::vector<Matrix>& shard_mats,
                                           std::span<const std::vector<Index>> token_ids,
                                           Index num_heads, CommLedger* ledger,
                                           bool count_as_qkv) {
  ShardShape s = validate_shards(shard_mats, token_ids);
  check_divisibility(s.d, num_heads, s.num_workers);
  const Index slice = s.d / s.num_workers;

  std::vector<Matrix> out(static_cast<std::size_t>(s.num_workers), Matrix(s.total, slice));
  for (Index src = 0; src < s.num_workers; ++src) {
    const Matrix& m = shard_mats[static_cast<std::size_t>(src)];
    for (Index dst = 0; dst < s.num_workers; ++dst) {
      Matrix& o = out[static_cast<std::size_t>(dst)];
      for (Index r = 0; r < s.rows; ++r) {
        Index token = token_ids[static_cast<std::size_t>(src)][static_cast<std::size_t>(r)];
        const Real* from = m.data() + r * s.d + dst * slice;
        std::copy(from, from + slice, o.data() + token * slice);
      }
      if (ledger) {
        auto& e = ledger->workers[static_cast<std::size_t>(src)];
        std::int64_t elems = static_cast<std::int64_t>(s.rows) * slice;
        if (count_as_qkv) {
          e.qkv_gather += elems;
          if (dst != src) e.qkv_gather_cross += elems;
        } else {
          e.output_scatter += elems;
          if (dst != src) e.output_scatter_cross += elems;
        }
      }
    }
  }
  return out;
}

std::vector<Matrix> all_to_all_head_to_seq(const std::vector<Matrix>& head_slices,
                                           std::span<const std::vector<Index>> token_ids,
                                           CommLedger* ledger, bool count_as_scatter) {
  if (head_slices.empty() || head_slices.size() != token_ids.size()) {
    throw ConfigError("all_to_all: shard count mismatch");
  }
  const Index num_workers = static_cast<Index>(head_slices.size());
  const Index total = head_slices[0].rows();
  const Index slice = head_slices[0].cols();
  for (const Matrix& m : head_slices) {
    if (m.rows() != total || m.cols() != slice) throw ConfigError("all_to_all: ragged slices");
  }
  Index rows = total / num_workers;
  if (rows * num_workers != total) throw ConfigError("all_to_all: sequence not divisible");

  std::vector<Matrix> out(static_cast<std::size_t>(num_workers), Matrix(rows, slice * num_workers));
  for (Index src = 0; src < num_workers; ++src) {
    const Matrix& m = head_slices[static_cast<std::size_t>(src)];
    for (Index dst = 0; dst < num_workers; ++dst) {
      Matrix& o = out[static_cast<std::size_t>(dst)];
      for (Index r = 0; r < rows; ++r) {
        Index token = token_ids[static_cast<std::size_t>(dst)][static_cast<std::size_t>(r)];
        const Real* from = m.data() + token * slice;
        std::copy(from, from + slice, o.data() + r * o.cols() + src * slice);
      }
      if (ledger) {
        auto& e = ledger->workers[static_cast<std::size_t>(src)];
        std::int64_t elems = static_cast<std::int64_t>(rows) * slice;
        if (count_as_scatter) {
          e.output_scatter += elems;
          if (dst != src) e.output_scatter_cross += elems;
        } else {
          e.qkv_gather += elems;
          if (dst != src) e.qkv_gather_cross += elems;
        }
      }
    }
  }
  return out;
}

DistAttnResult run_distributed_layer(const std::vector<WorkerShard>& shards,
                                     const AttnPattern& pattern, const Permutation& perm,
                                     Index num_heads, std::span<const Real> bias,
                                     std::span<const Real> weight_mult, CommLedger& ledger) {
  if (shards.empty()) throw ConfigError("run_distributed_layer: no shards");
  const Index num_workers = static_cast<Index>(shards.size());
  if (static_cast<Index>(ledger.workers.size()) != num_workers) {
    throw ConfigError("run_distributed_layer: ledger sized for wrong worker count");
  }
  std::vector<Matrix> q_mats, k_mats, v_mats;
  std::vector<std::vector<Index>> tokens;
  for (const WorkerShard& sh : shards) {
    q_mats.push_back(sh.q_sub);
    k_mats.push_back(sh.k_sub);
    v_mats.push_back(sh.v_sub);
    tokens.push_back(sh.token_ids);
  }
  const Index d = q_mats[0].cols();
  const Index total = q_mats[0].rows() * num_workers;
  if (pattern.rows != total) throw ConfigError("run_distributed_layer: pattern/sequence mismatch");
  if (perm.size() != total) throw ConfigError("run_distributed_layer: permutation size mismatch");
  check_divisibility(d, num_heads, num_workers);
  const Index head_dim = d / num_heads;
  const Index heads_per_worker = num_heads / num_workers;
  if (!weight_mult.empty() &&
      static_cast<Index>(weight_mult.size()) != num_heads * pattern.nnz()) {
    throw ConfigError("run_distributed_layer: weight_mult size mismatch");
  }

  auto q_full = all_to_all_seq_to_head(q_mats, tokens, num_heads, &ledger, true);
  auto k_full = all_to_all_seq_to_head(k_mats, tokens, num_heads, &ledger, true);
  auto v_full = all_to_all_seq_to_head(v_mats, tokens, num_heads, &ledger, true);
  if (!bias.empty()) {
    for (auto& e : ledger.workers) e.bias_exchange += static_cast<std::int64_t>(bias.size());
  }

  DistAttnResult res;
  std::vector<Matrix> out_slices;
  out_slices.reserve(static_cast<std::size_t>(num_workers));
  for (Index w = 0; w < num_workers; ++w) {
    Matrix qp = permute_rows(q_full[static_cast<std::size_t>(w)], perm);
    Matrix kp = permute_rows(k_full[static_cast<std::size_t>(w)], perm);
    Matrix vp = permute_rows(v_full[static_cast<std::size_t>(w)], perm);
    Matrix out_p(total, qp.cols());
    for (Index t = 0; t < heads_per_worker; ++t) {
      const Index h = w * heads_per_worker + t;
      Matrix qh = slice_cols(qp, t * head_dim, (t + 1) * head_dim);
      Matrix kh = slice_cols(kp, t * head_dim, (t + 1) * head_dim);
      Matrix vh = slice_cols(vp, t * head_dim, (t + 1) * head_dim);
      std::span<const Real> mult{};
      if (!weight_mult.empty()) {
        mult = weight_mult.subspan(static_cast<std::size_t>(h * pattern.nnz()),
                                   static_cast<std::size_t>(pattern.nnz()));
      }
      AttnResult r = sparse_attention(qh, kh, vh, pattern, bias, mult);
      res.macs += r.macs;
      place_cols(out_p, r.output, t * head_dim);
    }
    out_slices.push_back(unpermute_rows(out_p, perm));
  }
  res.out_shards = all_to_all_head_to_seq(out_slices, tokens, &ledger, true);
  return res;
}

DistAttnResult run_distributed_layer(const std::vector<WorkerShard>& shards, const Graph* g_exec,
                                     AttentionMode mode, const ClusterSparseLayout* layout,
                                     const Permutation& perm, Index num_heads,
                                     CommLedger& ledger) {
  AttnPattern pattern;
  if (mode.mode == Mode::Dense) {
    pattern = dense_pattern(perm.size());
  } else if (layout != nullptr) {
    pattern = layout->pattern;
  } else if (g_exec != nullptr) {
    pattern = pattern_from_graph(*g_exec);
  } else {
    throw ConfigError("run_distributed_layer: sparse mode without a graph");
  }
  return run_distributed_layer(shards, pattern, perm, num_heads, {}, {}, ledger);
}

DistAttnGrads run_distributed_layer_backward(const std::vector<WorkerShard>& shards,
                                             const AttnPattern& pattern, const Permutation& perm,
                                             Index num_heads, std::span<const Real> bias,
                                             std::span<const Real> weight_mult,
                                             const std::vector<Matrix>& upstream_shards) {
  const Index num_workers = static_cast<Index>(shards.size());
  std::vector<Matrix> q_mats, k_mats, v_mats;
  std::vector<std::vector<Index>> tokens;
  for (const WorkerShard& sh : shards) {
    q_mats.push_back(sh.q_sub);
    k_mats.push_back(sh.k_sub);
    v_mats.push_back(sh.v_sub);
    tokens.push_back(sh.token_ids);
  }
  const Index d = q_mats[0].cols();
  const Index total = q_mats[0].rows() * num_workers;
  check_divisibility(d, num_heads, num_workers);
  const Index head_dim = d / num_heads;
  const Index heads_per_worker = num_heads / num_workers;

  auto q_full = all_to_all_seq_to_head(q_mats, tokens, num_heads, nullptr, true);
  auto k_full = all_to_all_seq_to_head(k_mats, tokens, num_heads, nullptr, true);
  auto v_full = all_to_all_seq_to_head(v_mats, tokens, num_heads, nullptr, true);
  // Upstream grads arrive sharded like the forward output; the backward of
  // the output scatter is the forward gather.
  auto up_full = all_to_all_seq_to_head(upstream_shards, tokens, num_heads, nullptr, true);

  DistAttnGrads grads;
  grads.dbias.assign(static_cast<std::size_t>(pattern.nnz()), 0);
  std::vector<Matrix> dq_slices, dk_slices, dv_slices;
  for (Index w = 0; w < num_workers; ++w) {
    Matrix qp = permute_rows(q_full[static_cast<std::size_t>(w)], perm);
    Matrix kp = permute_rows(k_full[static_cast<std::size_t>(w)], perm);
    Matrix vp = permute_rows(v_full[static_cast<std::size_t>(w)], perm);
    Matrix up = permute_rows(up_full[static_cast<std::size_t>(w)], perm);
    Matrix dq_p(total, qp.cols()), dk_p(total, qp.cols()), dv_p(total, qp.cols());
    for (Index t = 0; t < heads_per_worker; ++t) {
      const Index h = w * heads_per_worker + t;
      Matrix qh = slice_cols(qp, t * head_dim, (t + 1) * head_dim);
      Matrix kh = slice_cols(kp, t * head_dim, (t + 1) * head_dim);
      Matrix vh = slice_cols(vp, t * head_dim, (t + 1) * head_dim);
      Matrix uh = slice_cols(up, t * head_dim, (t + 1) * head_dim);
      std::span<const Real> mult{};
      if (!weight_mult.empty()) {
        mult = weight_mult.subspan(static_cast<std::size_t>(h * pattern.nnz()),
                                   static_cast<std::size_t>(pattern.nnz()));
      }
      AttnGrads g = sparse_attention_backward(qh, kh, vh, pattern, bias, mult, uh);
      for (std::size_t p = 0; p < g.dbias.size(); ++p) grads.dbias[p] += g.dbias[p];
      place_cols(dq_p, g.dq, t * head_dim);
      place_cols(dk_p, g.dk, t * head_dim);
      place_cols(dv_p, g.dv, t * head_dim);
    }
    dq_slices.push_back(unpermute_rows(dq_p, perm));
    dk_slices.push_back(unpermute_rows(dk_p, perm));
    dv_slices.push_back(unpermute_rows(dv_p, perm));
  }
  grads.dq_sub = all_to_all_head_to_seq(dq_slices, tokens, nullptr, true);
  grads.dk_sub = all_to_all_head_to_seq(dk_slices, tokens, nullptr, true);
  grads.dv_sub = all_to_all_head_to_seq(dv_slices, tokens, nullptr, true);
  return grads;
}

}  // namespace gte
