#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace hloba::diffcore {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor of rank 1 or 2. A rank-1 tensor of length n behaves as a 1 x n row.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor scalar(double value);
  static Tensor row(const Eigen::VectorXd& v);
  static Tensor from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }

  /// Number of rows when viewed as a matrix (1 for rank 1).
  Eigen::Index rows() const noexcept;
  /// Number of columns when viewed as a matrix.
  Eigen::Index cols() const noexcept;

  Eigen::Map<RowMatrix> matrix() { return {values_.data(), rows(), cols()}; }
  Eigen::Map<const RowMatrix> matrix() const { return {values_.data(), rows(), cols()}; }
  Eigen::Map<Eigen::VectorXd> flat() { return {values_.data(), static_cast<Eigen::Index>(values_.size())}; }
  Eigen::Map<const Eigen::VectorXd> flat() const {
    return {values_.data(), static_cast<Eigen::Index>(values_.size())};
  }

  double item() const;
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

}  // namespace hloba::diffcore
