#include "gte/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace gte {

namespace {

void check_shapes(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.rows() != k.rows() || q.rows() != v.rows()) {
    throw ConfigError("attention: Q/K/V row counts differ");
  }
  if (q.cols() != k.cols()) throw ConfigError("attention: Q/K column counts differ");
  if (q.cols() < 1) throw ConfigError("attention: d_K must be >= 1");
}

void check_finite(const Matrix& m, const char* name) {
  if (!m.all_finite()) throw DataError(std::string("attention: non-finite ") + name);
}

}  // namespace

AttnPattern pattern_from_graph(const Graph& g) {
  AttnPattern p;
  p.rows = g.num_nodes;
  p.row_offsets = g.row_offsets;
  p.cols = g.col_indices;
  return p;
}

AttnPattern dense_pattern(Index n) {
  AttnPattern p;
  p.rows = n;
  p.row_offsets.resize(static_cast<std::size_t>(n) + 1);
  p.cols.resize(static_cast<std::size_t>(n * n));
  for (Index i = 0; i <= n; ++i) p.row_offsets[i] = i * n;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) p.cols[static_cast<std::size_t>(i * n + j)] = j;
  }
  return p;
}

AttnResult dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           const Matrix* bias, const Matrix* weight_mult) {
  check_shapes(q, k, v);
  check_finite(q, "Q");
  check_finite(k, "K");
  check_finite(v, "V");
  const Index s = q.rows(), dk = q.cols(), dv = v.cols();
  if (bias) {
    if (bias->rows() != s || bias->cols() != s) throw ConfigError("dense_attention: bias shape");
    check_finite(*bias, "bias");
  }
  if (weight_mult && (weight_mult->rows() != s || weight_mult->cols() != s)) {
    throw ConfigError("dense_attention: weight_mult shape");
  }
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dk));

  AttnResult res;
  res.output = Matrix(s, dv);
  std::vector<Real> scores(static_cast<std::size_t>(s));
  for (Index i = 0; i < s; ++i) {
    const Real* qi = q.data() + i * dk;
    Real row_max = -std::numeric_limits<Real>::infinity();
    for (Index j = 0; j < s; ++j) {
      const Real* kj = k.data() + j * dk;
      Real acc = 0;
      for (Index t = 0; t < dk; ++t) acc += qi[t] * kj[t];
      acc *= scale;
      if (bias) acc += (*bias)(i, j);
      scores[static_cast<std::size_t>(j)] = acc;
      row_max = std::max(row_max, acc);
    }
    Real denom = 0;
    for (Index j = 0; j < s; ++j) {
      Real e = std::exp(scores[static_cast<std::size_t>(j)] - row_max);
      scores[static_cast<std::size_t>(j)] = e;
      denom += e;
    }
    Real* out = res.output.data() + i * dv;
    for (Index j = 0; j < s; ++j) {
      Real w = scores[static_cast<std::size_t>(j)] / denom;
      if (weight_mult) w *= (*weight_mult)(i, j);
      const Real* vj = v.data() + j * dv;
      for (Index t = 0; t < dv; ++t) out[t] += w * vj[t];
    }
  }
  res.macs.score_macs = s * s * dk;
  res.macs.weight_macs = s * s * dv;
  return res;
}

AttnResult sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                            const AttnPattern& pat, std::span<const Real> bias,
                            std::span<const Real> weight_mult, bool forbid_empty_rows) {
  check_shapes(q, k, v);
  check_finite(q, "Q");
  check_finite(k, "K");
  check_finite(v, "V");
  if (pat.rows != q.rows()) throw ConfigError("sparse_attention: pattern/sequence length mismatch");
  if (!bias.empty() && static_cast<Index>(bias.size()) != pat.nnz()) {
    throw ConfigError("sparse_attention: bias must cover exactly the attended pairs");
  }
  if (!weight_mult.empty() && static_cast<Index>(weight_mult.size()) != pat.nnz()) {
    throw ConfigError("sparse_attention: weight_mult size mismatch");
  }
  const Index s = q.rows(), dk = q.cols(), dv = v.cols();
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dk));

  AttnResult res;
  res.output = Matrix(s, dv);
  std::vector<Real> scores;
  for (Index i = 0; i < s; ++i) {
    const Index begin = pat.row_offsets[i], end = pat.row_offsets[i + 1];
    const Index deg = end - begin;
    if (deg == 0) {
      if (forbid_empty_rows) {
        throw DataError("sparse_attention: row " + std::to_string(i) +
                        " attends to nothing; run add_self_loops");
      }
      continue;  // zero output row
    }
    Real* out = res.output.data() + i * dv;
    const Real* qi = q.data() + i * dk;
    if (deg == 1) {
      // Softmax of a singleton is exactly 1; skip the exponentials.
      Real w = 1.0;
      if (!weight_mult.empty()) w = weight_mult[static_cast<std::size_t>(begin)];
      const Real* vj = v.data() + pat.cols[static_cast<std::size_t>(begin)] * dv;
      for (Index t = 0; t < dv; ++t) out[t] = w * vj[t];
      continue;
    }
    scores.assign(static_cast<std::size_t>(deg), 0);
    Real row_max = -std::numeric_limits<Real>::infinity();
    for (Index e = begin; e < end; ++e) {
      const Real* kj = k.data() + pat.cols[static_cast<std::size_t>(e)] * dk;
      Real acc = 0;
      for (Index t = 0; t < dk; ++t) acc += qi[t] * kj[t];
      acc *= scale;
      if (!bias.empty()) acc += bias[static_cast<std::size_t>(e)];
      scores[static_cast<std::size_t>(e - begin)] = acc;
      row_max = std::max(row_max, acc);
    }
    Real denom = 0;
    for (Real& sc : scores) {
      sc = std::exp(sc - row_max);
      denom += sc;
    }
    for (Index e = begin; e < end; ++e) {
      Real w = scores[static_cast<std::size_t>(e - begin)] / denom;
      if (!weight_mult.empty()) w *= weight_mult[static_cast<std::size_t>(e)];
      const Real* vj = v.data() + pat.cols[static_cast<std::size_t>(e)] * dv;
      for (Index t = 0; t < dv; ++t) out[t] += w * vj[t];
    }
  }
  res.macs.score_macs = pat.nnz() * dk;
  res.macs.weight_macs = pat.nnz() * dv;
  return res;
}

AttnResult edge_sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const Graph& g, std::span<const Real> bias,
                                 std::span<const Real> weight_mult) {
  if (g.num_nodes != q.rows()) {
    throw ConfigError("edge_sparse_attention: graph/sequence length mismatch");
  }
  return sparse_attention(q, k, v, pattern_from_graph(g), bias, weight_mult,
                          /*forbid_empty_rows=*/true);
}

AttnGrads dense_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const Matrix* bias, const Matrix* weight_mult,
                                   const Matrix& upstream) {
  check_shapes(q, k, v);
  const Index s = q.rows(), dk = q.cols(), dv = v.cols();
  if (upstream.rows() != s || upstream.cols() != dv) {
    throw ConfigError("dense_attention_backward: upstream shape mismatch");
  }
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dk));

  AttnGrads g;
  g.dq = Matrix(s, dk);
  g.dk = Matrix(s, dk);
  g.dv = Matrix(s, dv);
  g.dbias.assign(static_cast<std::size_t>(s * s), 0);

  std::vector<Real> w(static_cast<std::size_t>(s)), dw(static_cast<std::size_t>(s));
  for (Index i = 0; i < s; ++i) {
    const Real* qi = q.data() + i * dk;
    Real row_max = -std::numeric_limits<Real>::infinity();
    for (Index j = 0; j < s; ++j) {
      const Real* kj = k.data() + j * dk;
      Real acc = 0;
      for (Index t = 0; t < dk; ++t) acc += qi[t] * kj[t];
      acc *= scale;
      if (bias) acc += (*bias)(i, j);
      w[static_cast<std::size_t>(j)] = acc;
      row_max = std::max(row_max, acc);
    }
    Real denom = 0;
    for (Index j = 0; j < s; ++j) {
      Real e = std::exp(w[static_cast<std::size_t>(j)] - row_max);
      w[static_cast<std::size_t>(j)] = e;
      denom += e;
    }
    for (Index j = 0; j < s; ++j) w[static_cast<std::size_t>(j)] /= denom;

    const Real* up = upstream.data() + i * dv;
    // dv and dw; the weight_mult factor sits between softmax and aggregation.
    Real dot = 0;  // sum_j w_j * dw_j
    for (Index j = 0; j < s; ++j) {
      const Real* vj = v.data() + j * dv;
      Real m = weight_mult ? (*weight_mult)(i, j) : 1.0;
      Real dwj = 0;
      for (Index t = 0; t < dv; ++t) dwj += up[t] * vj[t];
      Real* dvj = g.dv.data() + j * dv;
      Real wm = w[static_cast<std::size_t>(j)] * m;
      for (Index t = 0; t < dv; ++t) dvj[t] += wm * up[t];
      dw[static_cast<std::size_t>(j)] = dwj * m;
      dot += w[static_cast<std::size_t>(j)] * dw[static_cast<std::size_t>(j)];
    }
    Real* dqi = g.dq.data() + i * dk;
    for (Index j = 0; j < s; ++j) {
      Real ds = w[static_cast<std::size_t>(j)] * (dw[static_cast<std::size_t>(j)] - dot);
      g.dbias[static_cast<std::size_t>(i * s + j)] = ds;
      const Real* kj = k.data() + j * dk;
      Real* dkj = g.dk.data() + j * dk;
      Real dss = ds * scale;
      for (Index t = 0; t < dk; ++t) {
        dqi[t] += dss * kj[t];
        dkj[t] += dss * qi[t];
      }
    }
  }
  return g;
}

AttnGrads sparse_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                    const AttnPattern& pat, std::span<const Real> bias,
                                    std::span<const Real> weight_mult, const Matrix& upstream) {
  check_shapes(q, k, v);
  const Index s = q.rows(), dk = q.cols(), dv = v.cols();
  if (pat.rows != s) throw ConfigError("sparse_attention_backward: pattern mismatch");
  if (upstream.rows() != s || upstream.cols() != dv) {
    throw ConfigError("sparse_attention_backward: upstream shape mismatch");
  }
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dk));

  AttnGrads g;
  g.dq = Matrix(s, dk);
  g.dk = Matrix(s, dk);
  g.dv = Matrix(s, dv);
  g.dbias.assign(static_cast<std::size_t>(pat.nnz()), 0);

  std::vector<Real> w, dw;
  for (Index i = 0; i < s; ++i) {
    const Index begin = pat.row_offsets[i], end = pat.row_offsets[i + 1];
    const Index deg = end - begin;
    if (deg == 0) continue;
    const Real* qi = q.data() + i * dk;
    const Real* up = upstream.data() + i * dv;
    if (deg == 1) {
      // Constant weight 1: no score gradient, value row passes upstream through.
      Index j = pat.cols[static_cast<std::size_t>(begin)];
      Real m = weight_mult.empty() ? 1.0 : weight_mult[static_cast<std::size_t>(begin)];
      Real* dvj = g.dv.data() + j * dv;
      for (Index t = 0; t < dv; ++t) dvj[t] += m * up[t];
      continue;
    }
    w.assign(static_cast<std::size_t>(deg), 0);
    dw.assign(static_cast<std::size_t>(deg), 0);
    Real row_max = -std::numeric_limits<Real>::infinity();
    for (Index e = begin; e < end; ++e) {
      const Real* kj = k.data() + pat.cols[static_cast<std::size_t>(e)] * dk;
      Real acc = 0;
      for (Index t = 0; t < dk; ++t) acc += qi[t] * kj[t];
      acc *= scale;
      if (!bias.empty()) acc += bias[static_cast<std::size_t>(e)];
      w[static_cast<std::size_t>(e - begin)] = acc;
      row_max = std::max(row_max, acc);
    }
    Real denom = 0;
    for (Real& x : w) {
      x = std::exp(x - row_max);
      denom += x;
    }
    for (Real& x : w) x /= denom;

    Real dot = 0;
    for (Index e = begin; e < end; ++e) {
      Index j = pat.cols[static_cast<std::size_t>(e)];
      Real m = weight_mult.empty() ? 1.0 : weight_mult[static_cast<std::size_t>(e)];
      const Real* vj = v.data() + j * dv;
      Real dwj = 0;
      for (Index t = 0; t < dv; ++t) dwj += up[t] * vj[t];
      Real* dvj = g.dv.data() + j * dv;
      Real wm = w[static_cast<std::size_t>(e - begin)] * m;
      for (Index t = 0; t < dv; ++t) dvj[t] += wm * up[t];
      dw[static_cast<std::size_t>(e - begin)] = dwj * m;
      dot += w[static_cast<std::size_t>(e - begin)] * dw[static_cast<std::size_t>(e - begin)];
    }
    Real* dqi = g.dq.data() + i * dk;
    for (Index e = begin; e < end; ++e) {
      Index j = pat.cols[static_cast<std::size_t>(e)];
      Real ds = w[static_cast<std::size_t>(e - begin)] * (dw[static_cast<std::size_t>(e - begin)] - dot);
      g.dbias[static_cast<std::size_t>(e)] = ds;
      const Real* kj = k.data() + j * dk;
      Real* dkj = g.dk.data() + j * dk;
      Real dss = ds * scale;
      for (Index t = 0; t < dk; ++t) {
        dqi[t] += dss * kj[t];
        dkj[t] += dss * qi[t];
      }
    }
  }
  return g;
}

}  // namespace gte
