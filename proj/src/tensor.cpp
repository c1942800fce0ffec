#include "tulip/tensor.hpp"

#include <sstream>

#include "tulip/error.hpp"

namespace tulip {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    require(d >= 0, Errc::kShapeMismatch, "negative dimension in shape");
    n *= d;
  }
  return n;
}

Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  require(a >= 0 && a < rank, Errc::kShapeMismatch,
          "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(static_cast<std::int64_t>(data_.size()) == numel(shape_), Errc::kShapeMismatch,
          "data length " + std::to_string(data_.size()) + " does not match shape " +
              to_string(shape_));
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  return shape_[normalize_axis(axis, rank())];
}

template <typename T>
T Tensor<T>::item() const {
  require(data_.size() == 1, Errc::kShapeMismatch, "item() needs a single-element tensor");
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace tulip
