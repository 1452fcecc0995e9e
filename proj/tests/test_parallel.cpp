#include <numeric>
#include <set>

#include "doctest.h"
#include "gte/parallel.hpp"
#include "oracles.hpp"

using namespace gte;

TEST_SUITE_BEGIN("parallel");

namespace {

std::vector<Matrix> random_shard_mats(const std::vector<WorkerShard>& shards, Index d,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Matrix> mats;
  for (const WorkerShard& sh : shards) {
    mats.push_back(Matrix::randn(static_cast<Index>(sh.token_ids.size()), d, 1.0, rng));
  }
  return mats;
}

std::vector<std::vector<Index>> ids_of(const std::vector<WorkerShard>& shards) {
  std::vector<std::vector<Index>> ids;
  for (const WorkerShard& sh : shards) ids.push_back(sh.token_ids);
  return ids;
}

// Serial reference for the distributed layer: per-head sparse attention on
// the permuted full matrices.
Matrix serial_reference(const Matrix& q, const Matrix& k, const Matrix& v,
                        const AttnPattern& pat, const Permutation& perm, Index heads,
                        std::span<const Real> bias) {
  const Index s = q.rows(), d = q.cols(), hd = d / heads;
  Matrix qp(s, d), kp(s, d), vp(s, d);
  for (Index r = 0; r < s; ++r) {
    for (Index c = 0; c < d; ++c) {
      qp(r, c) = q(perm.inverse[r], c);
      kp(r, c) = k(perm.inverse[r], c);
      vp(r, c) = v(perm.inverse[r], c);
    }
  }
  Matrix out_p(s, d);
  for (Index h = 0; h < heads; ++h) {
    Matrix qh(s, hd), kh(s, hd), vh(s, hd);
    for (Index r = 0; r < s; ++r) {
      for (Index c = 0; c < hd; ++c) {
        qh(r, c) = qp(r, h * hd + c);
        kh(r, c) = kp(r, h * hd + c);
        vh(r, c) = vp(r, h * hd + c);
      }
    }
    auto res = sparse_attention(qh, kh, vh, pat, bias);
    for (Index r = 0; r < s; ++r) {
      for (Index c = 0; c < hd; ++c) out_p(r, h * hd + c) = res.output(r, c);
    }
  }
  Matrix out(s, d);
  for (Index t = 0; t < s; ++t) {
    for (Index c = 0; c < d; ++c) out(t, c) = out_p(perm.forward[t], c);
  }
  return out;
}

std::vector<WorkerShard> shards_from_full(const Matrix& q, const Matrix& k, const Matrix& v,
                                          Index p, std::uint64_t seed) {
  auto shards = partition_sequence(q.rows(), p, seed);
  for (WorkerShard& sh : shards) {
    Index rows = static_cast<Index>(sh.token_ids.size());
    sh.q_sub = Matrix(rows, q.cols());
    sh.k_sub = Matrix(rows, q.cols());
    sh.v_sub = Matrix(rows, q.cols());
    for (Index r = 0; r < rows; ++r) {
      Index t = sh.token_ids[r];
      std::copy(q.row(t).begin(), q.row(t).end(), sh.q_sub.row(r).begin());
      std::copy(k.row(t).begin(), k.row(t).end(), sh.k_sub.row(r).begin());
      std::copy(v.row(t).begin(), v.row(t).end(), sh.v_sub.row(r).begin());
    }
  }
  return shards;
}

Matrix reassemble(const std::vector<Matrix>& out_shards, const std::vector<WorkerShard>& shards,
                  Index s, Index d) {
  Matrix full(s, d);
  for (std::size_t w = 0; w < shards.size(); ++w) {
    for (std::size_t r = 0; r < shards[w].token_ids.size(); ++r) {
      Index t = shards[w].token_ids[r];
      std::copy(out_shards[w].row(static_cast<Index>(r)).begin(),
                out_shards[w].row(static_cast<Index>(r)).end(), full.row(t).begin());
    }
  }
  return full;
}

}  // namespace

TEST_CASE("partition_sequence shapes and padding") {
  auto shards = partition_sequence(8, 2, 1);
  REQUIRE(shards.size() == 2);
  std::set<Index> seen;
  for (const auto& sh : shards) {
    CHECK(sh.token_ids.size() == 4);
    seen.insert(sh.token_ids.begin(), sh.token_ids.end());
  }
  CHECK(seen.size() == 8);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 7);

  // S=7, P=2: padded to 8, exactly one masked token.
  auto padded = partition_sequence(7, 2, 1);
  std::set<Index> all;
  for (const auto& sh : padded) all.insert(sh.token_ids.begin(), sh.token_ids.end());
  CHECK(all.size() == 8);
  Index masked = 0;
  for (Index t : all) {
    if (t >= 7) ++masked;
  }
  CHECK(masked == 1);

  auto single = partition_sequence(5, 1, 9);
  REQUIRE(single.size() == 1);
  CHECK(single[0].token_ids.size() == 5);

  CHECK_THROWS_AS(partition_sequence(4, 0, 1), ConfigError);
}

TEST_CASE("all-to-all element accounting matches 3Sd/P") {
  const Index s = 8, d = 4, p = 2;
  auto shards = partition_sequence(s, p, 3);
  CommLedger ledger(p);
  auto ids = ids_of(shards);
  for (int rep = 0; rep < 3; ++rep) {  // Q, K, V
    auto mats = random_shard_mats(shards, d, 10 + rep);
    all_to_all_seq_to_head(mats, ids, 4, &ledger, true);
  }
  for (Index w = 0; w < p; ++w) {
    CHECK(ledger.workers[w].qkv_gather == 3 * s * d / p);
    CHECK(ledger.workers[w].qkv_gather_cross == 3 * s * d / p / p * (p - 1));
  }
}

TEST_CASE("P=1 exchange is a no-op with zero cross traffic") {
  const Index s = 6, d = 4;
  auto shards = partition_sequence(s, 1, 2);
  auto mats = random_shard_mats(shards, d, 5);
  CommLedger ledger(1);
  auto out = all_to_all_seq_to_head(mats, ids_of(shards), 2, &ledger, true);
  REQUIRE(out.size() == 1);
  CHECK(ledger.workers[0].qkv_gather_cross == 0);
  CHECK(ledger.workers[0].qkv_gather == s * d);
  // Rows land in token order.
  for (Index r = 0; r < s; ++r) {
    Index token = shards[0].token_ids[r];
    for (Index c = 0; c < d; ++c) CHECK(out[0](token, c) == mats[0](r, c));
  }
}

TEST_CASE("gather followed by scatter is the identity") {
  const Index s = 12, d = 6, p = 3;
  auto shards = partition_sequence(s, p, 7);
  auto mats = random_shard_mats(shards, d, 8);
  auto ids = ids_of(shards);
  auto slices = all_to_all_seq_to_head(mats, ids, 6, nullptr, true);
  auto back = all_to_all_head_to_seq(slices, ids, nullptr, true);
  for (Index w = 0; w < p; ++w) CHECK(max_abs_diff(back[w], mats[w]) == 0.0);
}

TEST_CASE("divisibility violations raise config errors") {
  auto shards = partition_sequence(8, 2, 1);
  auto mats = random_shard_mats(shards, 6, 2);
  // heads=3 not divisible by workers=2
  CHECK_THROWS_AS(all_to_all_seq_to_head(mats, ids_of(shards), 3, nullptr, true), ConfigError);
  // d=6 not divisible by heads=4
  CHECK_THROWS_AS(all_to_all_seq_to_head(mats, ids_of(shards), 4, nullptr, true), ConfigError);
}

TEST_CASE("distributed layer equals the serial reference for P in {1,2,4}") {
  const Index s = 16, d = 8, heads = 4;
  std::mt19937_64 rng(21);
  Matrix q = Matrix::randn(s, d, 1.0, rng);
  Matrix k = Matrix::randn(s, d, 1.0, rng);
  Matrix v = Matrix::randn(s, d, 1.0, rng);
  Graph g = oracle::random_graph(s, 0.3, 5, true);
  AttnPattern pat = pattern_from_graph(g);
  Permutation perm = reorder(g, 4, 3);
  std::vector<Real> bias(pat.nnz());
  std::normal_distribution<Real> nd(0.0, 0.2);
  for (Real& b : bias) b = nd(rng);

  Matrix expect = serial_reference(q, k, v, pat, perm, heads, bias);
  for (Index p : {1, 2, 4}) {
    auto shards = shards_from_full(q, k, v, p, 100 + p);
    CommLedger ledger(p);
    auto res = run_distributed_layer(shards, pat, perm, heads, bias, {}, ledger);
    Matrix got = reassemble(res.out_shards, shards, s, d);
    CHECK(max_abs_diff(got, expect) <= 1e-6);
    // 4Sd/P transport contract per worker.
    for (Index w = 0; w < p; ++w) {
      CHECK(ledger.transport_elements(w) == 4 * s * d / p);
      CHECK(ledger.workers[w].bias_exchange == pat.nnz());
    }
    CHECK(res.macs.score_macs == pat.nnz() * (d / heads) * heads);
  }
}

TEST_CASE("ledger halves exactly when P doubles") {
  const Index s = 16, d = 8, heads = 8;
  std::mt19937_64 rng(31);
  Matrix q = Matrix::randn(s, d, 1.0, rng);
  Matrix k = Matrix::randn(s, d, 1.0, rng);
  Matrix v = Matrix::randn(s, d, 1.0, rng);
  Graph g = oracle::random_graph(s, 0.4, 6, true);
  AttnPattern pat = pattern_from_graph(g);
  Permutation perm = Permutation::identity(s);
  std::int64_t prev = -1;
  for (Index p : {1, 2, 4, 8}) {
    auto shards = shards_from_full(q, k, v, p, 50);
    CommLedger ledger(p);
    run_distributed_layer(shards, pat, perm, heads, {}, {}, ledger);
    std::int64_t per_worker = ledger.transport_elements(0);
    if (prev > 0) CHECK(per_worker * 2 == prev);
    prev = per_worker;
  }
}

TEST_CASE("mode-level entry points") {
  const Index s = 8, d = 4, heads = 2;
  std::mt19937_64 rng(41);
  Matrix q = Matrix::randn(s, d, 1.0, rng);
  Matrix k = Matrix::randn(s, d, 1.0, rng);
  Matrix v = Matrix::randn(s, d, 1.0, rng);
  Graph g = oracle::random_graph(s, 0.5, 9, true);
  Permutation perm = Permutation::identity(s);
  auto shards = shards_from_full(q, k, v, 2, 4);

  CommLedger ledger(2);
  AttentionMode dense{Mode::Dense, ModeReason::ScheduledDense};
  auto rd = run_distributed_layer(shards, nullptr, dense, nullptr, perm, heads, ledger);
  CHECK(rd.macs.score_macs == s * s * d);

  AttentionMode sparse{Mode::Sparse, ModeReason::ConditionsPassed};
  CHECK_THROWS_AS(run_distributed_layer(shards, nullptr, sparse, nullptr, perm, heads, ledger),
                  ConfigError);
  Graph gexec = permute_graph(g, perm);
  auto rs = run_distributed_layer(shards, &gexec, sparse, nullptr, perm, heads, ledger);
  CHECK(rs.macs.score_macs == g.nnz() * d);
}

TEST_CASE("masked padding tokens stay isolated") {
  // 6 real tokens, P=4 -> padded to 8 with 2 masked tokens.
  const Index s_real = 6, p = 4, d = 4, heads = 4;
  auto shards = partition_sequence(s_real, p, 11);
  const Index s_pad = 8;
  std::mt19937_64 rng(51);
  Matrix q = Matrix::randn(s_pad, d, 1.0, rng);
  Matrix k = Matrix::randn(s_pad, d, 1.0, rng);
  Matrix v = Matrix::randn(s_pad, d, 1.0, rng);

  // Pattern: complete over the real block, self-loops for pads.
  std::vector<std::pair<Index, Index>> edges;
  for (Index i = 0; i < s_real; ++i) {
    for (Index j = 0; j < s_real; ++j) edges.emplace_back(i, j);
  }
  for (Index t = s_real; t < s_pad; ++t) edges.emplace_back(t, t);
  Graph g = graph_from_edges(s_pad, edges);
  AttnPattern pat = pattern_from_graph(g);
  Permutation perm = Permutation::identity(s_pad);

  for (WorkerShard& sh : shards) {
    Index rows = static_cast<Index>(sh.token_ids.size());
    sh.q_sub = Matrix(rows, d);
    sh.k_sub = Matrix(rows, d);
    sh.v_sub = Matrix(rows, d);
    for (Index r = 0; r < rows; ++r) {
      Index t = sh.token_ids[r];
      std::copy(q.row(t).begin(), q.row(t).end(), sh.q_sub.row(r).begin());
      std::copy(k.row(t).begin(), k.row(t).end(), sh.k_sub.row(r).begin());
      std::copy(v.row(t).begin(), v.row(t).end(), sh.v_sub.row(r).begin());
    }
  }
  CommLedger ledger(p);
  auto res = run_distributed_layer(shards, pat, perm, heads, {}, {}, ledger);
  Matrix got = reassemble(res.out_shards, shards, s_pad, d);

  // Pad rows reproduce their own value row; real rows ignore pads entirely.
  for (Index t = s_real; t < s_pad; ++t) {
    for (Index c = 0; c < d; ++c) CHECK(got(t, c) == v(t, c));
  }
  Matrix q_real(s_real, d), k_real(s_real, d), v_real(s_real, d);
  for (Index i = 0; i < s_real; ++i) {
    for (Index c = 0; c < d; ++c) {
      q_real(i, c) = q(i, c);
      k_real(i, c) = k(i, c);
      v_real(i, c) = v(i, c);
    }
  }
  Matrix expect = serial_reference(q_real, k_real, v_real, dense_pattern(s_real),
                                   Permutation::identity(s_real), heads, {});
  for (Index i = 0; i < s_real; ++i) {
    for (Index c = 0; c < d; ++c) CHECK(got(i, c) == doctest::Approx(expect(i, c)).epsilon(1e-9));
  }

  // Zero upstream on pads -> zero grads for their value rows via real tokens.
  std::vector<Matrix> up_shards;
  for (const WorkerShard& sh : shards) {
    Matrix up(static_cast<Index>(sh.token_ids.size()), d);
    for (std::size_t r = 0; r < sh.token_ids.size(); ++r) {
      if (sh.token_ids[r] < s_real) {
        for (Index c = 0; c < d; ++c) up(static_cast<Index>(r), c) = 1.0;
      }
    }
    up_shards.push_back(std::move(up));
  }
  auto grads = run_distributed_layer_backward(shards, pat, perm, heads, {}, {}, up_shards);
  Matrix dv = reassemble(grads.dv_sub, shards, s_pad, d);
  for (Index t = s_real; t < s_pad; ++t) {
    for (Index c = 0; c < d; ++c) CHECK(dv(t, c) == 0.0);
  }
}

TEST_CASE("distributed backward is P-invariant") {
  const Index s = 16, d = 8, heads = 4;
  std::mt19937_64 rng(61);
  Matrix q = Matrix::randn(s, d, 1.0, rng);
  Matrix k = Matrix::randn(s, d, 1.0, rng);
  Matrix v = Matrix::randn(s, d, 1.0, rng);
  Matrix up = Matrix::randn(s, d, 1.0, rng);
  Graph g = oracle::random_graph(s, 0.3, 71, true);
  AttnPattern pat = pattern_from_graph(g);
  Permutation perm = reorder(g, 2, 5);
  std::vector<Real> bias(pat.nnz(), 0.1);

  std::vector<Matrix> ref_q, ref_k, ref_v;
  std::vector<Real> ref_bias;
  for (Index p : {1, 2, 4}) {
    auto shards = shards_from_full(q, k, v, p, 77);
    std::vector<Matrix> up_shards;
    for (const WorkerShard& sh : shards) {
      Matrix u(static_cast<Index>(sh.token_ids.size()), d);
      for (std::size_t r = 0; r < sh.token_ids.size(); ++r) {
        Index t = sh.token_ids[r];
        std::copy(up.row(t).begin(), up.row(t).end(), u.row(static_cast<Index>(r)).begin());
      }
      up_shards.push_back(std::move(u));
    }
    auto grads = run_distributed_layer_backward(shards, pat, perm, heads, bias, {}, up_shards);
    Matrix dq = reassemble(grads.dq_sub, shards, s, d);
    Matrix dk = reassemble(grads.dk_sub, shards, s, d);
    Matrix dv = reassemble(grads.dv_sub, shards, s, d);
    if (ref_q.empty()) {
      ref_q.push_back(dq);
      ref_k.push_back(dk);
      ref_v.push_back(dv);
      ref_bias = grads.dbias;
    } else {
      CHECK(max_abs_diff(dq, ref_q[0]) <= 1e-12);
      CHECK(max_abs_diff(dk, ref_k[0]) <= 1e-12);
      CHECK(max_abs_diff(dv, ref_v[0]) <= 1e-12);
      for (std::size_t i = 0; i < ref_bias.size(); ++i) {
        CHECK(grads.dbias[i] == doctest::Approx(ref_bias[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_SUITE_END();
