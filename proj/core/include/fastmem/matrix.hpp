// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fastmem/error.hpp"

namespace fastmem {

/// Dense row-major matrix. Value type; copies are deep.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0});

  /// Takes ownership of `data` (row-major). Rejects NaN/Inf when `checked`.
  static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<T> data,
                          bool checked = true);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  void append_row(std::span<const T> r);
  /// Keeps rows whose `keep` flag is set, preserving order.
  void retain_rows(const std::vector<bool>& keep);
  void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }
  std::size_t capacity_rows() const noexcept { return cols_ == 0 ? 0 : data_.capacity() / cols_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

/// a · bᵀ without materialising the transpose.
template <typename T>
Matrix<T> matmul_transposed(const Matrix<T>& a, const Matrix<T>& b);

/// aᵀ · b without materialising the transpose.
template <typename T>
Matrix<T> transposed_matmul(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
Matrix<T> transpose(const Matrix<T>& a);

/// Columns [first, first + count) as a new matrix.
template <typename T>
Matrix<T> column_block(const Matrix<T>& a, std::size_t first, std::size_t count);

template <typename T>
void set_column_block(Matrix<T>& dst, std::size_t first, const Matrix<T>& block);

template <typename T>
T frobenius_norm(const Matrix<T>& a);

template <typename T>
T dot(std::span<const T> a, std::span<const T> b);

template <typename T>
T norm2(std::span<const T> a);

/// Cosine similarity; 0 when either operand has zero norm.
template <typename T>
T cosine_similarity(std::span<const T> a, std::span<const T> b);

template <typename T>
Matrix<T> cast_matrix(const Matrix<double>& m);

template <typename T>
Matrix<double> to_double(const Matrix<T>& m);

extern template class Matrix<float>;
extern template class Matrix<double>;

}  // namespace fastmem
