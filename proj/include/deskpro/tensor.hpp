#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "deskpro/errors.hpp"

namespace deskpro {

// Dense row-major double tensor. Feature maps use NHWC layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<size_t>(numel_of(shape_)) != data_.size())
      throw ShapeError("tensor shape/data size mismatch");
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int ndims() const { return static_cast<int>(shape_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NHWC access
  double& at4(int n, int i, int j, int c) {
    return data_[idx4(n, i, j, c)];
  }
  double at4(int n, int i, int j, int c) const {
    return data_[idx4(n, i, j, c)];
  }
  // [H,W,C] access
  double& at3(int i, int j, int c) {
    return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + c];
  }
  double at3(int i, int j, int c) const {
    return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + c];
  }
  // [N,D] access
  double& at2(int n, int d) {
    return data_[static_cast<size_t>(n) * dim(1) + d];
  }
  double at2(int n, int d) const {
    return data_[static_cast<size_t>(n) * dim(1) + d];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

 private:
  size_t idx4(int n, int i, int j, int c) const {
    return ((static_cast<size_t>(n) * dim(1) + i) * dim(2) + j) * dim(3) + c;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

// Mixing hash used for all derived seeds (splitmix64 finalizer).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace deskpro
