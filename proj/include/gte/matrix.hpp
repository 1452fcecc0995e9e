#pragma once

#include <random>
#include <span>
#include <vector>

#include "gte/types.hpp"

namespace gte {

// Dense row-major matrix of Real. Deliberately small: desk-scale training
// needs plain loops, row spans and three matmul flavors, nothing else.
class Matrix {
 public:
  Matrix() = default;
  Matrix(Index rows, Index cols)
      : rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(rows * cols), Real{0}) {}

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Index size() const { return rows_ * cols_; }
  bool empty() const { return data_.empty(); }

  Real& operator()(Index r, Index c) { return data_[static_cast<std::size_t>(r * cols_ + c)]; }
  Real operator()(Index r, Index c) const { return data_[static_cast<std::size_t>(r * cols_ + c)]; }

  std::span<Real> row(Index r) { return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)}; }
  std::span<const Real> row(Index r) const { return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)}; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;

  static Matrix randn(Index rows, Index cols, Real stddev, std::mt19937_64& rng);

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<Real> data_;
};

// c = a * b
Matrix matmul(const Matrix& a, const Matrix& b);
// c = a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// c = a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

void add_inplace(Matrix& a, const Matrix& b);
// a += s * b
void axpy_inplace(Matrix& a, Real s, const Matrix& b);
Real max_abs_diff(const Matrix& a, const Matrix& b);

// Row-wise layer normalization: out = (x - mean) / sqrt(var + 1e-6) * scale
// + shift, scale/shift broadcast as 1 x cols rows. The cache holds what the
// backward pass needs.
struct LayerNormCache {
  Matrix normalized;          // rows before scale/shift
  std::vector<Real> inv_std;  // per row
};

Matrix layer_norm_rows(const Matrix& x, const Matrix& scale, const Matrix& shift,
                       LayerNormCache& cache);

// Returns dx; accumulates into dscale/dshift.
Matrix layer_norm_rows_backward(const Matrix& dout, const LayerNormCache& cache,
                                const Matrix& scale, Matrix& dscale, Matrix& dshift);

}  // namespace gte
