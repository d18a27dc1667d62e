#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntseg {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline std::string shape_string(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major N-d float tensor. Activations use N,C,H,W; convolution
// weights use outC,inC,kH,kW; upconvolution weights use inC,outC,kH,kW.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), T(0)) {}

  Tensor(std::vector<size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check(data_.size() == count(shape_),
          "tensor data length " + std::to_string(data_.size()) +
              " does not match shape " + shape_string());
  }

  static Tensor full(std::vector<size_t> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t dim(size_t i) const { return shape_.at(i); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  // 4-d accessor for N,C,H,W tensors. Not for inner loops; those use data().
  T& at4(size_t n, size_t c, size_t y, size_t x) {
    check(shape_.size() == 4, "at4 needs a rank-4 tensor, got " +
                                  shape_string());
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at4(size_t n, size_t c, size_t y, size_t x) const {
    check(shape_.size() == 4, "at4 needs a rank-4 tensor, got " +
                                  shape_string());
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  std::string shape_string() const { return ntseg::shape_string(shape_); }

  static size_t count(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<size_t> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ntseg
