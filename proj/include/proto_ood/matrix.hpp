#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "proto_ood/errors.hpp"

namespace proto_ood {

inline constexpr double kNormEps = 1e-12;
inline constexpr double kCosineEps = 1e-12;

/// Dense row-major matrix of doubles. The whole pipeline runs in 64-bit; the
/// networks are small and the gradient checks need the precision.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows) {
      if (row.size() != m.cols_) throw DimensionError("ragged initializer rows");
      std::copy(row.begin(), row.end(), m.data_.begin() + r * m.cols_);
      ++r;
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Byte-level equality; distinguishes -0.0 from 0.0 unlike operator==.
inline bool bits_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape_str(a) + " , " + shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
    }
  }
  return out;
}

/// a * b^T.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(a) + " , " + shape_str(b));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline double row_norm(const Matrix& m, std::size_t r) {
  double acc = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) acc += m(r, j) * m(r, j);
  return std::sqrt(acc);
}

struct RowNormalizeResult {
  Matrix normalized;
  /// 1 where the row norm fell below eps and the row was passed through.
  std::vector<std::uint8_t> below_eps;
};

inline RowNormalizeResult l2_normalize_rows(const Matrix& m, double eps = kNormEps) {
  RowNormalizeResult out{m, std::vector<std::uint8_t>(m.rows(), 0)};
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double norm = row_norm(m, i);
    if (norm < eps) {
      out.below_eps[i] = 1;
      continue;
    }
    for (std::size_t j = 0; j < m.cols(); ++j) out.normalized(i, j) /= norm;
  }
  return out;
}

/// Pairwise cosine similarity between rows of a and rows of b, clamped to
/// [-1, 1]. Rows with norm below eps (e.g. a never-updated prototype) yield 0.
inline Matrix cosine_rows(const Matrix& a, const Matrix& b, double eps = kCosineEps) {
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_rows: " + shape_str(a) + " vs " + shape_str(b));
  }
  std::vector<double> na(a.rows()), nb(b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) na[i] = row_norm(a, i);
  for (std::size_t j = 0; j < b.rows(); ++j) nb[j] = row_norm(b, j);
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) dot += a(i, k) * b(j, k);
      const double denom = std::max(na[i] * nb[j], eps);
      out(i, j) = std::clamp(dot / denom, -1.0, 1.0);
    }
  }
  return out;
}

/// Nudges a probability into the open interval (0, 1); exp underflow and
/// sigmoid saturation otherwise produce exact 0/1, which downstream logs and
/// focal terms cannot take. The shift is below every stated sum tolerance.
inline double clamp_open_unit(double p) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - 0x1p-53;
  return std::clamp(p, lo, hi);
}

/// Row-wise softmax, max-subtracted for stability. Every output row sums to 1
/// within 1e-9 and every entry lies strictly inside (0, 1), including in the
/// saturated one-hot limit.
inline Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m.cols(); ++j) mx = std::max(mx, m(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      out(i, j) = std::exp(m(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < m.cols(); ++j)
      out(i, j) = clamp_open_unit(out(i, j) / sum);
  }
  return out;
}

}  // namespace proto_ood
