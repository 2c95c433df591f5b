#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mapet/errors.hpp"

namespace mapet {

// Dense row-major matrix. Small on purpose: the models here are desk-scale and
// the matmul kernels below keep a fixed accumulation order (k ascending per
// output element) so that results are reproducible bit-for-bit and do not
// depend on the number of rows in the operands.
template <typename Scalar>
class Matrix {
 public:
  using value_type = Scalar;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Scalar fill = Scalar(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<Scalar> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::check_shape(data_.size() == rows_ * cols_, "Matrix: data size does not match shape");
  }

  Matrix(std::initializer_list<std::initializer_list<Scalar>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      detail::check_shape(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Scalar operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<Scalar> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Scalar> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& values() { return data_; }
  const std::vector<Scalar>& values() const { return data_; }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(Scalar(0)); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  template <typename Other>
  Matrix<Other> cast() const {
    Matrix<Other> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.data(), [](Scalar v) { return static_cast<Other>(v); });
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Scalar> data_;
};

inline std::string shape_string(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

// C (+)= A * B
template <typename S>
void gemm_nn(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c, bool accumulate = false) {
  detail::check_shape(a.cols() == b.rows(), "gemm_nn: inner dimensions differ " + shape_string(a.rows(), a.cols()) +
                                                " * " + shape_string(b.rows(), b.cols()));
  if (!accumulate || !(c.rows() == a.rows() && c.cols() == b.cols())) c = Matrix<S>(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    S* ci = c.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const S aik = a(i, k);
      const S* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C (+)= A * B^T
template <typename S>
void gemm_nt(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c, bool accumulate = false) {
  detail::check_shape(a.cols() == b.cols(), "gemm_nt: inner dimensions differ " + shape_string(a.rows(), a.cols()) +
                                                " * " + shape_string(b.rows(), b.cols()) + "^T");
  if (!accumulate || !(c.rows() == a.rows() && c.cols() == b.rows())) c = Matrix<S>(a.rows(), b.rows());
  const std::size_t kd = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const S* ai = a.data() + i * kd;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const S* bj = b.data() + j * kd;
      S acc = S(0);
      for (std::size_t k = 0; k < kd; ++k) acc += ai[k] * bj[k];
      c(i, j) += acc;
    }
  }
}

// C (+)= A^T * B
template <typename S>
void gemm_tn(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c, bool accumulate = false) {
  detail::check_shape(a.rows() == b.rows(), "gemm_tn: inner dimensions differ " + shape_string(a.rows(), a.cols()) +
                                                "^T * " + shape_string(b.rows(), b.cols()));
  if (!accumulate || !(c.rows() == a.cols() && c.cols() == b.cols())) c = Matrix<S>(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const S* bk = b.data() + k * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const S aki = a(k, i);
      S* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

template <typename S>
Matrix<S> matmul(const Matrix<S>& a, const Matrix<S>& b) {
  Matrix<S> c;
  gemm_nn(a, b, c);
  return c;
}

template <typename S>
Matrix<S> gather_rows(const Matrix<S>& m, std::span<const std::size_t> index) {
  Matrix<S> out(index.size(), m.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check(index[i] < m.rows(), "gather_rows: index out of range");
    std::copy_n(m.data() + index[i] * m.cols(), m.cols(), out.data() + i * m.cols());
  }
  return out;
}

}  // namespace mapet
