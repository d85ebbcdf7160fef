#include "kernels.hpp"

#include <string>

namespace ivcl::kernels {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " + to_string(b.dtype()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  require_same_dtype(a, b, op);
}

void require_rank(const Tensor& a, std::int64_t rank, const char* op) {
  if (a.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(a.shape()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_dtype(a, b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  return dispatch(a.dtype(), [&]<class T>(T) {
    std::vector<T> out(static_cast<std::size_t>(m * n));
    gemm_nn<T>(m, n, k, a.data<T>().data(), k, b.data<T>().data(), n, out.data(), n);
    return make<T>({m, n}, std::move(out));
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  return dispatch(a.dtype(), [&]<class T>(T) {
    std::vector<T> out(static_cast<std::size_t>(r * c));
    transpose<T>(r, c, a.data<T>().data(), out.data());
    return make<T>({c, r}, std::move(out));
  });
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul(transpose(a), b); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

namespace {
template <class Fn>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fn fn) {
  require_same_shape(a, b, name);
  return dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i], y[i]);
    return make<T>(a.shape(), std::move(out));
  });
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](auto x, auto y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](auto x, auto y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](auto x, auto y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  return dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    const T f = static_cast<T>(s);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * f;
    return make<T>(a.shape(), std::move(out));
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor sum_to_last(const Tensor& a) {
  const auto d = a.dim(-1);
  const auto rows = a.numel() / d;
  return dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    std::vector<T> out(static_cast<std::size_t>(d), T(0));
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(r * d + j)];
    return make<T>({d}, std::move(out));
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: " + to_string(a.shape()) + " cannot become " + to_string(shape));
  return a.view(std::move(shape));
}

}  // namespace ivcl::kernels
