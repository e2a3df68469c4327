#pragma once

#include <cassert>
#include <cstddef>
#include <numeric>
#include <vector>

namespace deblurkit {

// Dense double-precision array with row-major layout. Rank-3 tensors use
// (channels, height, width) ordering throughout the library.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(countOf(shape_), fill) {}

  static Tensor fromData(std::vector<int> shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    assert(static_cast<size_t>(countOf(t.shape_)) == t.data_.size());
    return t;
  }

  static Tensor scalar(double v) { return fromData({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int size() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }
  bool sameShape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<size_t>(i)]; }

  // Rank-3 accessors.
  int channels() const { assert(rank() == 3); return shape_[0]; }
  int height() const { assert(rank() == 3); return shape_[1]; }
  int width() const { assert(rank() == 3); return shape_[2]; }
  int plane() const { assert(rank() == 3); return shape_[1] * shape_[2]; }

  double& at(int c, int y, int x) {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  double at(int c, int y, int x) const {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

 private:
  static int countOf(const std::vector<int>& s) {
    int n = 1;
    for (int d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace deblurkit
