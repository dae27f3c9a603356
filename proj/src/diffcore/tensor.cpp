#include "hloba/diffcore/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "hloba/error.hpp"

namespace hloba::diffcore {

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty() || shape_.size() > 2) throw ContractError("tensor rank must be 1 or 2");
  std::size_t n = 1;
  for (std::size_t d : shape_) {
    if (d == 0) throw ContractError("tensor dimensions must be positive");
    n *= d;
  }
  if (n != values_.size()) {
    throw ContractError("tensor value count " + std::to_string(values_.size()) + " does not match shape product " +
                        std::to_string(n));
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::row(const Eigen::VectorXd& v) {
  return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

Tensor Tensor::from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  Tensor t = zeros({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  t.matrix() = m;
  return t;
}

Eigen::Index Tensor::rows() const noexcept { return shape_.size() == 2 ? static_cast<Eigen::Index>(shape_[0]) : 1; }

Eigen::Index Tensor::cols() const noexcept {
  if (shape_.empty()) return 0;
  return static_cast<Eigen::Index>(shape_.back());
}

double Tensor::item() const {
  if (values_.size() != 1) throw ContractError("item() requires a single-element tensor");
  return values_[0];
}

bool Tensor::all_finite() const noexcept {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace hloba::diffcore
