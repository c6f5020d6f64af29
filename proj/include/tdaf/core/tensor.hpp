#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tdaf {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename T, typename... Rest>
void msg_append(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  msg_append(os, rest...);
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::msg_append(os, args...);
  throw std::runtime_error(os.str());
}

template <typename... Args>
void require(bool cond, const Args&... args) {
  if (!cond) fail(args...);
}

/// Dims of a dense 4-D array in (batch, channel, height, width) order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  Shape() = default;
  Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
    require(n > 0 && c > 0 && h > 0 && w > 0, "Shape: all dims must be positive, got ", str());
  }

  std::int64_t numel() const { return std::int64_t(n) * c * h * w; }
  std::int64_t spatial() const { return std::int64_t(h) * w; }

  std::int64_t index(int bi, int ci, int yi, int xi) const {
    return ((std::int64_t(bi) * c + ci) * h + yi) * w + xi;
  }

  bool operator==(const Shape& o) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

/// Dense 4-D tensor with an optional gradient slot. Values are stored flat
/// in row-major (n, c, h, w) order.
template <typename Scalar>
struct Tensor {
  Shape shape;
  ArrayX<Scalar> values;
  ArrayX<Scalar> grad;  // size 0 until first accumulation
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, Scalar fill = Scalar(0)) : shape(s) {
    values = ArrayX<Scalar>::Constant(s.numel(), fill);
  }

  Scalar& at(int bi, int ci, int yi, int xi) { return values[shape.index(bi, ci, yi, xi)]; }
  Scalar at(int bi, int ci, int yi, int xi) const { return values[shape.index(bi, ci, yi, xi)]; }

  bool has_grad() const { return grad.size() == values.size(); }
  void ensure_grad() {
    if (!has_grad()) grad = ArrayX<Scalar>::Zero(values.size());
  }
  void clear_grad() { grad.resize(0); }

  bool all_finite() const { return values.isFinite().all(); }
};

template <typename Scalar>
using TensorPtr = std::shared_ptr<Tensor<Scalar>>;

template <typename Scalar>
TensorPtr<Scalar> make_tensor(Shape s, Scalar fill = Scalar(0), bool requires_grad = false) {
  auto t = std::make_shared<Tensor<Scalar>>(s, fill);
  t->requires_grad = requires_grad;
  return t;
}

template <typename Scalar>
TensorPtr<Scalar> clone_tensor(const TensorPtr<Scalar>& t) {
  auto out = std::make_shared<Tensor<Scalar>>(t->shape);
  out->values = t->values;
  out->requires_grad = t->requires_grad;
  return out;
}

}  // namespace tdaf
