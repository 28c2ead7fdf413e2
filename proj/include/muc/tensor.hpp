#pragma once

#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "muc/common.hpp"

namespace muc {

// Dense row-major fp64 tensor. Shapes are small (vectors, matrices, CxHxW
// images), so everything is kept simple and contiguous.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0)
      : shape_(std::move(shape)), v_(count(shape_), fill) {}
  Tensor(std::vector<int> shape, std::vector<double> values)
      : shape_(std::move(shape)), v_(std::move(values)) {
    if (v_.size() != count(shape_)) throw NumericError("Tensor: values do not match shape");
  }

  static Tensor scalar(double x) { return Tensor({1}, std::vector<double>{x}); }

  static Tensor from_matrix(const MatX& m) {
    Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) t.v_[static_cast<std::size_t>(r) * m.cols() + c] = m(r, c);
    return t;
  }
  static Tensor from_vector(const VecX& x) {
    Tensor t({static_cast<int>(x.size())});
    for (int i = 0; i < x.size(); ++i) t.v_[i] = x[i];
    return t;
  }

  MatX to_matrix() const {
    if (shape_.size() != 2) throw NumericError("Tensor: not a matrix");
    MatX m(shape_[0], shape_[1]);
    for (int r = 0; r < shape_[0]; ++r)
      for (int c = 0; c < shape_[1]; ++c) m(r, c) = v_[static_cast<std::size_t>(r) * shape_[1] + c];
    return m;
  }
  VecX to_vector() const {
    VecX x(static_cast<int>(v_.size()));
    for (std::size_t i = 0; i < v_.size(); ++i) x[static_cast<int>(i)] = v_[i];
    return x;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return v_.size(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  bool finite() const { return all_finite(v_.data(), v_.size()); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw NumericError("Tensor: nonpositive dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> v_;
};

}  // namespace muc
