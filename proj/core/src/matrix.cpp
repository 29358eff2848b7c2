// SPDX-License-Identifier: Apache-2.0

#include "fastmem/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fastmem {

template <typename T>
Matrix<T>::Matrix(std::size_t rows, std::size_t cols, T fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

template <typename T>
Matrix<T> Matrix<T>::from_data(std::size_t rows, std::size_t cols, std::vector<T> data,
                               bool checked) {
  if (data.size() != rows * cols) {
    throw DimensionError("matrix data has " + std::to_string(data.size()) + " values, expected " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.data_ = std::move(data);
  if (checked && !m.all_finite()) throw NumericError("matrix contains NaN or Inf");
  return m;
}

template <typename T>
Matrix<T> Matrix<T>::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
  return m;
}

template <typename T>
void Matrix<T>::append_row(std::span<const T> r) {
  if (rows_ == 0 && cols_ == 0) cols_ = r.size();
  if (r.size() != cols_) throw DimensionError("append_row: row width mismatch");
  data_.insert(data_.end(), r.begin(), r.end());
  ++rows_;
}

template <typename T>
void Matrix<T>::retain_rows(const std::vector<bool>& keep) {
  if (keep.size() != rows_) throw DimensionError("retain_rows: mask length mismatch");
  std::size_t out = 0;
  for (std::size_t r = 0; r < rows_; ++r) {
    if (!keep[r]) continue;
    if (out != r) {
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_), cols_,
                  data_.begin() + static_cast<std::ptrdiff_t>(out * cols_));
    }
    ++out;
  }
  rows_ = out;
  data_.resize(out * cols_);
}

template <typename T>
bool Matrix<T>::all_finite() const noexcept {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T{0}) continue;
      const T* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

template <typename T>
Matrix<T> matmul_transposed(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_transposed: inner dimension mismatch");
  Matrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot<T>(ai, b.row(j));
  }
  return c;
}

template <typename T>
Matrix<T> transposed_matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) throw DimensionError("transposed_matmul: row count mismatch");
  Matrix<T> c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* bk = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = a(k, i);
      if (aki == T{0}) continue;
      T* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Matrix<T> column_block(const Matrix<T>& a, std::size_t first, std::size_t count) {
  if (first + count > a.cols()) throw DimensionError("column_block: range out of bounds");
  Matrix<T> out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, first + j);
  return out;
}

template <typename T>
void set_column_block(Matrix<T>& dst, std::size_t first, const Matrix<T>& block) {
  if (block.rows() != dst.rows() || first + block.cols() > dst.cols()) {
    throw DimensionError("set_column_block: block does not fit");
  }
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) dst(i, first + j) = block(i, j);
}

template <typename T>
T frobenius_norm(const Matrix<T>& a) {
  return norm2<T>(a.values());
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T norm2(std::span<const T> a) {
  return std::sqrt(dot<T>(a, a));
}

template <typename T>
T cosine_similarity(std::span<const T> a, std::span<const T> b) {
  const T aa = dot<T>(a, a);
  const T bb = dot<T>(b, b);
  if (aa == T{0} || bb == T{0}) return T{0};
  // Identical rows give exactly 1 this way.
  T den = std::sqrt(aa * bb);
  if (!std::isfinite(den) || den == T{0}) den = std::sqrt(aa) * std::sqrt(bb);
  return std::clamp(dot<T>(a, b) / den, T{-1}, T{1});
}

template <typename T>
Matrix<T> cast_matrix(const Matrix<double>& m) {
  std::vector<T> data(m.values().begin(), m.values().end());
  return Matrix<T>::from_data(m.rows(), m.cols(), std::move(data), false);
}

template <typename T>
Matrix<double> to_double(const Matrix<T>& m) {
  std::vector<double> data(m.values().begin(), m.values().end());
  return Matrix<double>::from_data(m.rows(), m.cols(), std::move(data), false);
}

template class Matrix<float>;
template class Matrix<double>;

#define FASTMEM_INSTANTIATE(T)                                                       \
  template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                     \
  template Matrix<T> matmul_transposed(const Matrix<T>&, const Matrix<T>&);          \
  template Matrix<T> transposed_matmul(const Matrix<T>&, const Matrix<T>&);          \
  template Matrix<T> transpose(const Matrix<T>&);                                    \
  template Matrix<T> column_block(const Matrix<T>&, std::size_t, std::size_t);       \
  template void set_column_block(Matrix<T>&, std::size_t, const Matrix<T>&);         \
  template T frobenius_norm(const Matrix<T>&);                                       \
  template T dot(std::span<const T>, std::span<const T>);                            \
  template T norm2(std::span<const T>);                                              \
  template T cosine_similarity(std::span<const T>, std::span<const T>);              \
  template Matrix<T> cast_matrix<T>(const Matrix<double>&);                          \
  template Matrix<double> to_double(const Matrix<T>&);

FASTMEM_INSTANTIATE(float)
FASTMEM_INSTANTIATE(double)

#undef FASTMEM_INSTANTIATE

}  // namespace fastmem
