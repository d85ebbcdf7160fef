#include "ivcl/tensor.hpp"

#include <cstring>
#include <sstream>

namespace ivcl {

namespace {
thread_local DType g_default_dtype = DType::F32;
}

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

const char* to_string(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

DType default_dtype() { return g_default_dtype; }

PrecisionScope::PrecisionScope(DType dtype) : previous_(g_default_dtype) { g_default_dtype = dtype; }
PrecisionScope::~PrecisionScope() { g_default_dtype = previous_; }

namespace {
void validate_shape(const Shape& shape, std::size_t size) {
  for (auto d : shape)
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string(shape));
  if (static_cast<std::size_t>(numel_of(shape)) != size)
    throw ShapeError("shape " + to_string(shape) + " does not match buffer of " +
                     std::to_string(size) + " elements");
}
}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
  validate_shape(shape_, data.size());
  storage_ = std::make_shared<Storage>(Storage{std::move(data)});
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  validate_shape(shape_, data.size());
  storage_ = std::make_shared<Storage>(Storage{std::move(data)});
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  if (dtype == DType::F32) return Tensor(std::move(shape), std::vector<float>(n, static_cast<float>(value)));
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::zeros_like(const Tensor& other) { return zeros(other.shape(), other.dtype()); }

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return defined() ? numel_of(shape_) : 0; }

DType Tensor::dtype() const {
  if (!defined()) throw ContractViolation("dtype of undefined tensor");
  return storage_->buffer.index() == 0 ? DType::F32 : DType::F64;
}

void Tensor::check_dtype(DType want) const {
  if (!defined()) throw ContractViolation("access to undefined tensor");
  if (dtype() != want)
    throw ShapeError(std::string("dtype mismatch: tensor is ") + to_string(dtype()) + ", requested " +
                     to_string(want));
}

double Tensor::value(std::int64_t i) const {
  return dispatch(dtype(), [&]<class T>(T) { return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return value(0);
}

std::vector<float> Tensor::to_f32() const {
  return dispatch(dtype(), [&]<class T>(T) {
    auto d = data<T>();
    return std::vector<float>(d.begin(), d.end());
  });
}

std::vector<double> Tensor::to_f64() const {
  return dispatch(dtype(), [&]<class T>(T) {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::to(DType target) const {
  if (dtype() == target) return *this;
  Tensor out = target == DType::F32 ? Tensor(shape_, to_f32()) : Tensor(shape_, to_f64());
  out.requires_grad_ = requires_grad_;
  return out;
}

Tensor Tensor::clone() const {
  Tensor out = dispatch(dtype(), [&]<class T>(T) {
    auto d = data<T>();
    return Tensor(shape_, std::vector<T>(d.begin(), d.end()));
  });
  out.requires_grad_ = requires_grad_;
  return out;
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.storage_ = storage_;
  return out;
}

Tensor Tensor::view(Shape shape) const {
  if (numel_of(shape) != numel())
    throw ShapeError("view: " + to_string(shape_) + " cannot become " + to_string(shape));
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype() != other.dtype()) return false;
  return dispatch(dtype(), [&]<class T>(T) {
    auto a = data<T>();
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
  });
}

}  // namespace ivcl
