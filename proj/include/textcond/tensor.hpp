#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace textcond {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Heap buffer aligned for Eigen's widest packet. Reductions over Eigen maps
/// peel by pointer alignment, so a fixed base alignment keeps results
/// bit-identical from run to run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NCHW tensor. Vectors are stored as N x D x 1 x 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  }

  static Tensor like(const Tensor& other, T fill = T(0)) {
    return Tensor(other.n(), other.c(), other.h(), other.w(), fill);
  }

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  int plane_size() const { return shape_[2] * shape_[3]; }
  int sample_size() const { return shape_[1] * shape_[2] * shape_[3]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Buffer<T>& storage() { return data_; }
  const Buffer<T>& storage() const { return data_; }

  T* sample(int i) { return data_.data() + static_cast<std::size_t>(i) * sample_size(); }
  const T* sample(int i) const { return data_.data() + static_cast<std::size_t>(i) * sample_size(); }
  T* plane(int i, int ch) { return sample(i) + static_cast<std::size_t>(ch) * plane_size(); }
  const T* plane(int i, int ch) const { return sample(i) + static_cast<std::size_t>(ch) * plane_size(); }

  T& at(int i, int ch, int y, int x) {
    assert(i < n() && ch < c() && y < h() && x < w());
    return data_[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }
  const T& at(int i, int ch, int y, int x) const {
    assert(i < n() && ch < c() && y < h() && x < w());
    return data_[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  /// Copy of samples [first, first + count).
  Tensor slice(int first, int count) const {
    if (first < 0 || count < 0 || first + count > n()) throw ShapeError("slice out of range");
    Tensor out(count, c(), h(), w());
    std::copy_n(sample(first), static_cast<std::size_t>(count) * sample_size(), out.data());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n(), c(), h(), w());
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[' << n() << ',' << c() << ',' << h() << ',' << w() << ']';
    return os.str();
  }

  friend void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
      throw ShapeError(std::string(what) + ": shape " + a.shape_string() + " vs " + b.shape_string());
  }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  Buffer<T> data_;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Concatenates along channels; every input must share N, H and W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels: " + a.shape_string() + " vs " + b.shape_string());
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy_n(a.sample(i), a.sample_size(), out.sample(i));
    std::copy_n(b.sample(i), b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

/// Inverse of concat_channels for gradients: splits off the first `first_channels`.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int first_channels) {
  if (first_channels < 0 || first_channels > x.c()) throw ShapeError("split_channels: bad split");
  Tensor<T> a(x.n(), first_channels, x.h(), x.w());
  Tensor<T> b(x.n(), x.c() - first_channels, x.h(), x.w());
  for (int i = 0; i < x.n(); ++i) {
    std::copy_n(x.sample(i), a.sample_size(), a.sample(i));
    std::copy_n(x.sample(i) + a.sample_size(), b.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace textcond
