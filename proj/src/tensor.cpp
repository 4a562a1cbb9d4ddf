#include "pco/tensor.hpp"

#include <numeric>

namespace pco::ad {

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("tensor shape has non-positive extent " + shape_str(s));
    n *= e;
  }
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got shape " + shape_str(shape_));
  }
  return (*data_)[0];
}

IntTensor::IntTensor(Shape s, std::vector<int> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("int tensor data length does not match shape " + shape_str(shape));
  }
}

}  // namespace pco::ad
