#include "clbd/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace clbd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

ConstMap view(const Tensor2& t) { return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }
Map view(Tensor2& t) { return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }

void require(bool ok, const char* what, const Tensor2& a, const Tensor2& b) {
  if (!ok) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Tensor2: data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "*" + std::to_string(cols_));
  }
}

bool Tensor2::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor2::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  require(a.cols() == b.rows(), "matmul", a, b);
  Tensor2 out(a.rows(), b.cols());
  if (!out.empty() && a.cols() > 0) view(out).noalias() = view(a) * view(b);
  return out;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  require(a.cols() == b.cols(), "matmul_nt", a, b);
  Tensor2 out(a.rows(), b.rows());
  if (!out.empty() && a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
  require(a.rows() == b.rows(), "matmul_tn", a, b);
  Tensor2 out(a.cols(), b.cols());
  if (!out.empty() && a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Tensor2 gather_rows(const Tensor2& src, std::span<const std::size_t> rows) {
  Tensor2 out(rows.size(), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= src.rows()) throw DimensionError("gather_rows: row index out of range");
    std::memcpy(out.row(i).data(), src.row(rows[i]).data(), src.cols() * sizeof(double));
  }
  return out;
}

std::vector<double> column_sums(const Tensor2& t) {
  std::vector<double> out(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    for (std::size_t c = 0; c < t.cols(); ++c) out[c] += row[c];
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace clbd
