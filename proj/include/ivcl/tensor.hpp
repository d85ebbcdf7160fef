#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ivcl/error.hpp"

namespace ivcl {

enum class DType : std::uint8_t { F32, F64 };

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);
const char* to_string(DType dtype);

/// Precision used for tensors created without an explicit dtype on this thread.
/// F64 exists only for the finite-difference gradient checker.
DType default_dtype();

class PrecisionScope {
 public:
  explicit PrecisionScope(DType dtype);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  DType previous_;
};

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::F32) return fn(float{});
  return fn(double{});
}

/// Dense row-major n-d array. Copies share storage; every op allocates a fresh
/// output, so a Tensor value never changes underneath its holders. The one
/// exception is `mutable_data()`, used by optimizers and checkpoint loading to
/// update parameters between steps.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape, DType dtype = default_dtype());
  static Tensor full(Shape shape, double value, DType dtype = default_dtype());
  static Tensor scalar(double value, DType dtype = default_dtype());
  static Tensor zeros_like(const Tensor& other);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>());
    const auto& v = std::get<std::vector<T>>(storage_->buffer);
    return {v.data(), v.size()};
  }

  template <class T>
  std::span<T> mutable_data() {
    check_dtype(dtype_of<T>());
    auto& v = std::get<std::vector<T>>(storage_->buffer);
    return {v.data(), v.size()};
  }

  /// Element `i` of the flat buffer, widened to double.
  double value(std::int64_t i) const;
  /// Value of a single-element tensor.
  double item() const;
  std::vector<float> to_f32() const;
  std::vector<double> to_f64() const;

  Tensor to(DType dtype) const;
  Tensor clone() const;
  /// Same storage, detached from any tape and not a gradient leaf.
  Tensor detach() const;
  /// Detached alias of the same storage under a new shape of equal size.
  Tensor view(Shape shape) const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  /// Identity of the underlying buffer; gradient leaves are keyed on it.
  const void* storage_id() const { return storage_.get(); }
  std::int32_t node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }

  bool bit_equal(const Tensor& other) const;

 private:
  friend class GradTape;

  struct Storage {
    std::variant<std::vector<float>, std::vector<double>> buffer;
  };

  void check_dtype(DType want) const;

  Shape shape_;
  std::shared_ptr<Storage> storage_;
  std::int32_t node_ = -1;
  std::uint64_t tape_id_ = 0;
  bool requires_grad_ = false;
};

}  // namespace ivcl
