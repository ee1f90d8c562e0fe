#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "wassalign/common.hpp"

namespace wassalign {

enum class DType : uint8_t { Float32 = 1, Float64 = 2 };

const char* dtype_name(DType dt);
size_t dtype_size(DType dt);

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major n-d array. Scalars have an empty shape and one element.
// Tensors are plain values: copies are deep, moves are cheap, and the
// autodiff tape treats every produced tensor as immutable.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, DType::Float32) {}
  Tensor(Shape shape, DType dt);

  static Tensor zeros(Shape shape, DType dt = DType::Float32);
  static Tensor full(Shape shape, double value, DType dt = DType::Float32);
  static Tensor scalar(double value, DType dt = DType::Float32);
  static Tensor from(std::vector<float> data, Shape shape);
  static Tensor from(std::vector<double> data, Shape shape);

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  int64_t numel() const { return numel_; }
  size_t ndim() const { return shape_.size(); }
  int64_t dim(size_t i) const;
  bool is_scalar() const { return shape_.empty(); }

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  // Linear-index access through double; convenient for dtype-agnostic
  // code paths (tests, serialization). Hot loops use data<T>() instead.
  double at(int64_t i) const;
  void set(int64_t i, double v);
  double item() const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  Tensor astype(DType dt) const;
  Tensor reshaped(Shape shape) const;

  // Bitwise equality of shape, dtype and payload.
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  int64_t numel_ = 0;
  DType dtype_ = DType::Float32;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace wassalign
