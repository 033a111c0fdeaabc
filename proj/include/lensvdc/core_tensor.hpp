#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lensvdc {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Dense row-major matrix of doubles. Hidden states are stored as 1×d rows
// or plain vectors; weights as d_in×d_out so that y = x · W.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

// Row vector times matrix: v (length m.rows()) · m.
inline std::vector<double> vecmat(std::span<const double> v, const Matrix& m) {
  if (v.size() != m.rows()) {
    throw ShapeError("vecmat: vector of length " + std::to_string(v.size()) + " times " +
                     std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double vk = v[k];
    if (vk == 0.0) continue;
    auto src = m.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += vk * src[j];
  }
  return out;
}

// In-place max-subtracted softmax of one row.
inline void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  double mx = row[0];
  for (double v : row) {
    if (std::isnan(v)) throw std::domain_error("softmax: NaN input");
    mx = std::max(mx, v);
  }
  if (!std::isfinite(mx)) throw std::domain_error("softmax: non-finite input");
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

inline Matrix softmax_rows(Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) softmax_inplace(m.row(r));
  return m;
}

inline constexpr double kNormEps = 1e-6;

inline std::vector<double> rms_norm(std::span<const double> v, std::span<const double> gain,
                                    double eps = kNormEps) {
  if (v.size() != gain.size()) {
    throw ShapeError("rms_norm: vector length " + std::to_string(v.size()) +
                     " != gain length " + std::to_string(gain.size()));
  }
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double mean = v.empty() ? 0.0 : ss / static_cast<double>(v.size());
  const double inv = 1.0 / std::sqrt(mean + eps);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv * gain[i];
  return out;
}

struct IndexedValue {
  std::size_t index;
  double value;
  friend bool operator==(const IndexedValue&, const IndexedValue&) = default;
};

// Top-k by value descending; equal values keep the lower index first.
inline std::vector<IndexedValue> topk(std::span<const double> values, std::size_t k) {
  if (k < 1 || k > values.size()) {
    throw std::out_of_range("topk: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(values.size()) + "]");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  std::vector<IndexedValue> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i], values[idx[i]]});
  return out;
}

}  // namespace lensvdc
