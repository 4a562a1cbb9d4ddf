#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pco::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct AdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch; message names the op and both shapes.
struct ShapeError : AdError {
  using AdError::AdError;
};

// An op produced NaN/Inf, or a gradient did during backward.
struct NonFiniteError : AdError {
  using AdError::AdError;
};

// Precondition failure (denominator below epsilon, bad ids, ...).
struct DomainError : AdError {
  using AdError::AdError;
};

struct TapeError : AdError {
  using AdError::AdError;
};

class Tape;

// Dense multidimensional array of 64-bit reals. Data is shared and
// immutable once constructed; tensors recorded on a tape additionally
// carry the node handle. A default tensor is empty (rank 0, no data).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
  }
  bool empty() const { return !data_; }

  std::span<const double> data() const {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }
  double item() const;

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape;
  friend struct OpAccess;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Integer companion for ids and indices; never differentiated.
struct IntTensor {
  Shape shape;
  std::vector<int> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<int> d);
};

}  // namespace pco::ad
