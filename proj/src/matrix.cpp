#include "gte/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "gte/types.hpp"

namespace gte {

bool Matrix::all_finite() const {
  for (Real v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix Matrix::randn(Index rows, Index cols, Real stddev, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<Real> dist(0.0, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: shape mismatch");
  Matrix c(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index k = 0; k < a.cols(); ++k) {
      const Real aik = a(i, k);
      if (aik == 0.0) continue;
      const Real* brow = b.data() + k * b.cols();
      Real* crow = c.data() + i * c.cols();
      for (Index j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ConfigError("matmul_nt: shape mismatch");
  Matrix c(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) {
      Real acc = 0;
      const Real* ar = a.data() + i * a.cols();
      const Real* br = b.data() + j * b.cols();
      for (Index k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
      c(i, j) = acc;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ConfigError("matmul_tn: shape mismatch");
  Matrix c(a.cols(), b.cols());
  for (Index k = 0; k < a.rows(); ++k) {
    const Real* ar = a.data() + k * a.cols();
    const Real* br = b.data() + k * b.cols();
    for (Index i = 0; i < a.cols(); ++i) {
      const Real aki = ar[i];
      if (aki == 0.0) continue;
      Real* crow = c.data() + i * c.cols();
      for (Index j = 0; j < b.cols(); ++j) crow[j] += aki * br[j];
    }
  }
  return c;
}

void add_inplace(Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("add: shape mismatch");
  for (Index i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

void axpy_inplace(Matrix& a, Real s, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("axpy: shape mismatch");
  for (Index i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

Real max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("max_abs_diff: shape mismatch");
  Real m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

namespace {
constexpr Real kLnEps = 1e-6;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& scale, const Matrix& shift,
                       LayerNormCache& cache) {
  const Index s = x.rows(), d = x.cols();
  cache.normalized = Matrix(s, d);
  cache.inv_std.assign(static_cast<std::size_t>(s), 0);
  Matrix out(s, d);
  for (Index i = 0; i < s; ++i) {
    auto xi = x.row(i);
    Real mu = 0;
    for (Real v : xi) mu += v;
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (Real v : xi) var += (v - mu) * (v - mu);
    var /= static_cast<Real>(d);
    Real inv = 1.0 / std::sqrt(var + kLnEps);
    cache.inv_std[static_cast<std::size_t>(i)] = inv;
    for (Index j = 0; j < d; ++j) {
      Real nh = (xi[static_cast<std::size_t>(j)] - mu) * inv;
      cache.normalized(i, j) = nh;
      out(i, j) = nh * scale(0, j) + shift(0, j);
    }
  }
  return out;
}

Matrix layer_norm_rows_backward(const Matrix& dout, const LayerNormCache& cache,
                                const Matrix& scale, Matrix& dscale, Matrix& dshift) {
  const Index s = dout.rows(), d = dout.cols();
  Matrix dx(s, d);
  for (Index i = 0; i < s; ++i) {
    Real mean_dn = 0, mean_dn_nh = 0;
    for (Index j = 0; j < d; ++j) {
      Real nh = cache.normalized(i, j);
      Real dn = dout(i, j) * scale(0, j);
      dscale(0, j) += dout(i, j) * nh;
      dshift(0, j) += dout(i, j);
      mean_dn += dn;
      mean_dn_nh += dn * nh;
    }
    mean_dn /= static_cast<Real>(d);
    mean_dn_nh /= static_cast<Real>(d);
    Real inv = cache.inv_std[static_cast<std::size_t>(i)];
    for (Index j = 0; j < d; ++j) {
      Real dn = dout(i, j) * scale(0, j);
      dx(i, j) = inv * (dn - mean_dn - cache.normalized(i, j) * mean_dn_nh);
    }
  }
  return dx;
}

}  // namespace gte
