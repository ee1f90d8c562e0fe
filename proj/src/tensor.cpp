#include "wassalign/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace wassalign {

const char* dtype_name(DType dt) {
  switch (dt) {
    case DType::Float32: return "float32";
    case DType::Float64: return "float64";
  }
  return "?";
}

size_t dtype_size(DType dt) { return dt == DType::Float32 ? 4 : 8; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

Tensor::Tensor(Shape shape, DType dt) : shape_(std::move(shape)), dtype_(dt) {
  numel_ = shape_numel(shape_);
  if (dt == DType::Float32) {
    data_ = std::vector<float>(static_cast<size_t>(numel_), 0.0f);
  } else {
    data_ = std::vector<double>(static_cast<size_t>(numel_), 0.0);
  }
}

Tensor Tensor::zeros(Shape shape, DType dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t(std::move(shape), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, value);
  return t;
}

Tensor Tensor::scalar(double value, DType dt) {
  Tensor t(Shape{}, dt);
  t.set(0, value);
  return t;
}

Tensor Tensor::from(std::vector<float> data, Shape shape) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<int64_t>(data.size());
  t.dtype_ = DType::Float32;
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::from(std::vector<double> data, Shape shape) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<int64_t>(data.size());
  t.dtype_ = DType::Float64;
  t.data_ = std::move(data);
  return t;
}

int64_t Tensor::dim(size_t i) const {
  if (i >= shape_.size()) throw ShapeError("Tensor::dim: axis out of range");
  return shape_[i];
}

template <>
std::span<float> Tensor::data<float>() {
  if (dtype_ != DType::Float32) throw ShapeError("Tensor: float32 access on float64 tensor");
  return std::get<std::vector<float>>(data_);
}

template <>
std::span<double> Tensor::data<double>() {
  if (dtype_ != DType::Float64) throw ShapeError("Tensor: float64 access on float32 tensor");
  return std::get<std::vector<double>>(data_);
}

template <>
std::span<const float> Tensor::data<float>() const {
  if (dtype_ != DType::Float32) throw ShapeError("Tensor: float32 access on float64 tensor");
  return std::get<std::vector<float>>(data_);
}

template <>
std::span<const double> Tensor::data<double>() const {
  if (dtype_ != DType::Float64) throw ShapeError("Tensor: float64 access on float32 tensor");
  return std::get<std::vector<double>>(data_);
}

double Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel_) throw ShapeError("Tensor::at: index out of range");
  if (dtype_ == DType::Float32)
    return std::get<std::vector<float>>(data_)[static_cast<size_t>(i)];
  return std::get<std::vector<double>>(data_)[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
  if (i < 0 || i >= numel_) throw ShapeError("Tensor::set: index out of range");
  if (dtype_ == DType::Float32)
    std::get<std::vector<float>>(data_)[static_cast<size_t>(i)] = static_cast<float>(v);
  else
    std::get<std::vector<double>>(data_)[static_cast<size_t>(i)] = v;
}

double Tensor::item() const {
  if (numel_ != 1)
    throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape_) + " is not scalar");
  return at(0);
}

bool Tensor::all_finite() const {
  if (dtype_ == DType::Float32) {
    for (float v : std::get<std::vector<float>>(data_))
      if (!std::isfinite(v)) return false;
  } else {
    for (double v : std::get<std::vector<double>>(data_))
      if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype_) return *this;
  Tensor out(shape_, dt);
  for (int64_t i = 0; i < numel_; ++i) out.set(i, at(i));
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel_)
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  if (dtype_ == DType::Float32) {
    const auto& a = std::get<std::vector<float>>(data_);
    const auto& b = std::get<std::vector<float>>(other.data_);
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
  }
  const auto& a = std::get<std::vector<double>>(data_);
  const auto& b = std::get<std::vector<double>>(other.data_);
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()));
}

}  // namespace wassalign
