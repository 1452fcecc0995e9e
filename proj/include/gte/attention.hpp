#pragma once

#include <span>
#include <vector>

#include "gte/graph.hpp"
#include "gte/matrix.hpp"
#include "gte/types.hpp"

namespace gte {

// Row-compressed set of attended (row, col) pairs; cols sorted per row.
struct AttnPattern {
  Index rows = 0;
  std::vector<Index> row_offsets;
  std::vector<Index> cols;

  Index nnz() const { return static_cast<Index>(cols.size()); }
  std::span<const Index> row_cols(Index r) const {
    return {cols.data() + row_offsets[r],
            static_cast<std::size_t>(row_offsets[r + 1] - row_offsets[r])};
  }
};

AttnPattern pattern_from_graph(const Graph& g);
AttnPattern dense_pattern(Index n);

// Exact multiply-accumulate counts. Dense: score_macs = S^2 * d_K.
// Pattern-sparse: score_macs = nnz * d_K.
struct MacCounter {
  std::int64_t score_macs = 0;
  std::int64_t weight_macs = 0;
  MacCounter& operator+=(const MacCounter& o) {
    score_macs += o.score_macs;
    weight_macs += o.weight_macs;
    return *this;
  }
};

struct AttnResult {
  Matrix output;
  MacCounter macs;
};

// softmax(Q K^T / sqrt(d_K) + bias) V with row-max stabilization.
// weight_mult, when present, scales attention weights post-softmax (inverted
// dropout masks); shaped like bias.
AttnResult dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           const Matrix* bias = nullptr, const Matrix* weight_mult = nullptr);

// Attention restricted to a pair pattern: SDDMM scores, per-row softmax over
// the attended set, SpMM aggregation. bias/weight_mult align with the
// pattern's pair enumeration. Rows with no pairs yield a zero output row
// unless forbid_empty_rows is set (the topology-induced kernel requires
// self-loops).
AttnResult sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                            const AttnPattern& pat, std::span<const Real> bias = {},
                            std::span<const Real> weight_mult = {},
                            bool forbid_empty_rows = false);

// Topology-induced pattern: scores only for graph edges.
AttnResult edge_sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const Graph& g, std::span<const Real> bias = {},
                                 std::span<const Real> weight_mult = {});

struct AttnGrads {
  Matrix dq, dk, dv;
  std::vector<Real> dbias;  // per pattern pair; dense: S*S row-major
};

// Analytic gradients of the forward maps; softmax recomputed internally.
AttnGrads dense_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const Matrix* bias, const Matrix* weight_mult,
                                   const Matrix& upstream);
AttnGrads sparse_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                    const AttnPattern& pat, std::span<const Real> bias,
                                    std::span<const Real> weight_mult, const Matrix& upstream);

}  // namespace gte
