#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clbd {

/// Base class for every error the library reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major matrix of doubles.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool all_finite() const;
  void fill(double v);

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a * b
Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// a * b^T
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
/// a^T * b
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);

/// Copies the listed rows into a new tensor.
Tensor2 gather_rows(const Tensor2& src, std::span<const std::size_t> rows);

std::vector<double> column_sums(const Tensor2& t);

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace clbd
