#include "ivcl/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ivcl/tape.hpp"
#include "kernels.hpp"

namespace ivcl {

namespace k = kernels;

namespace {

template <class T>
std::vector<T> buffer(const Tensor& t) {
  auto d = t.data<T>();
  return std::vector<T>(d.begin(), d.end());
}

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = k::add(a, b);
  if (!any_tracked({&a, &b})) return out;
  return record_op(std::move(out), {&a, &b}, [](BackwardContext& ctx) {
    if (ctx.needs(0)) ctx.set(0, ctx.grad_out());
    if (ctx.needs(1)) ctx.set(1, ctx.grad_out());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = k::sub(a, b);
  if (!any_tracked({&a, &b})) return out;
  return record_op(std::move(out), {&a, &b}, [](BackwardContext& ctx) {
    if (ctx.needs(0)) ctx.set(0, ctx.grad_out());
    if (ctx.needs(1)) ctx.set(1, k::neg(ctx.grad_out()));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = k::mul(a, b);
  if (!any_tracked({&a, &b})) return out;
  return record_op(std::move(out), {&a, &b}, [a = a.detach(), b = b.detach()](BackwardContext& ctx) {
    if (ctx.needs(0)) ctx.set(0, k::mul(ctx.grad_out(), b));
    if (ctx.needs(1)) ctx.set(1, k::mul(ctx.grad_out(), a));
  });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = k::scale(a, factor);
  if (!any_tracked({&a})) return out;
  return record_op(std::move(out), {&a}, [factor](BackwardContext& ctx) {
    ctx.set(0, k::scale(ctx.grad_out(), factor));
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  const auto d = x.dim(-1);
  if (row.numel() != d)
    throw ShapeError("add_row: row of shape " + to_string(row.shape()) + " does not match last axis of " +
                     to_string(x.shape()));
  k::require_same_dtype(x, row, "add_row");
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    auto rs = row.data<T>();
    std::vector<T> o(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) o[i] = xs[i] + rs[i % sz(d)];
    return k::make<T>(x.shape(), std::move(o));
  });
  if (!any_tracked({&x, &row})) return out;
  return record_op(std::move(out), {&x, &row}, [row_shape = row.shape()](BackwardContext& ctx) {
    if (ctx.needs(0)) ctx.set(0, ctx.grad_out());
    if (ctx.needs(1)) ctx.set(1, k::reshape(k::sum_to_last(ctx.grad_out()), row_shape));
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out = k::matmul(a, b);
  if (!any_tracked({&a, &b})) return out;
  return record_op(std::move(out), {&a, &b}, [a = a.detach(), b = b.detach()](BackwardContext& ctx) {
    if (ctx.needs(0)) ctx.set(0, k::matmul_nt(ctx.grad_out(), b));
    if (ctx.needs(1)) ctx.set(1, k::matmul_tn(a, ctx.grad_out()));
  });
}

Tensor transpose(const Tensor& a) {
  Tensor out = k::transpose(a);
  if (!any_tracked({&a})) return out;
  return record_op(std::move(out), {&a}, [](BackwardContext& ctx) { ctx.set(0, k::transpose(ctx.grad_out())); });
}

Tensor reshape(const Tensor& a, Shape shape) {
  Tensor out = k::reshape(a, std::move(shape));
  if (!any_tracked({&a})) return out;
  return record_op(std::move(out), {&a}, [in_shape = a.shape()](BackwardContext& ctx) {
    ctx.set(0, k::reshape(ctx.grad_out(), in_shape));
  });
}

Tensor gelu(const Tensor& x) {
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    std::vector<T> o(xs.size());
    const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
    for (std::size_t i = 0; i < xs.size(); ++i) o[i] = xs[i] * T(0.5) * (T(1) + std::erf(xs[i] * inv_sqrt2));
    return k::make<T>(x.shape(), std::move(o));
  });
  if (!any_tracked({&x})) return out;
  return record_op(std::move(out), {&x}, [x = x.detach()](BackwardContext& ctx) {
    ctx.set(0, dispatch(x.dtype(), [&]<class T>(T) {
      auto xs = x.data<T>();
      auto g = ctx.grad_out().data<T>();
      std::vector<T> o(xs.size());
      const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
      const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(xs[i] * inv_sqrt2));
        const T pdf = std::exp(T(-0.5) * xs[i] * xs[i]) * inv_sqrt2pi;
        o[i] = g[i] * (cdf + xs[i] * pdf);
      }
      return k::make<T>(x.shape(), std::move(o));
    }));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " elements, got " +
                     to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  k::require_same_dtype(x, gamma, "layer_norm");
  k::require_same_dtype(x, beta, "layer_norm");
  const auto rows = x.numel() / d;
  Tensor normalized, inv_std;
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    auto gs = gamma.data<T>();
    auto bs = beta.data<T>();
    std::vector<T> xhat(xs.size()), o(xs.size()), istd(sz(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* row = xs.data() + r * d;
      T mu = 0;
      for (std::int64_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<T>(d);
      T var = 0;
      for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(d);
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      istd[sz(r)] = is;
      for (std::int64_t j = 0; j < d; ++j) {
        const T h = (row[j] - mu) * is;
        xhat[sz(r * d + j)] = h;
        o[sz(r * d + j)] = h * gs[sz(j)] + bs[sz(j)];
      }
    }
    normalized = k::make<T>(x.shape(), std::move(xhat));
    inv_std = k::make<T>({rows}, std::move(istd));
    return k::make<T>(x.shape(), std::move(o));
  });
  if (!any_tracked({&x, &gamma, &beta})) return out;
  return record_op(std::move(out), {&x, &gamma, &beta},
                   [normalized, inv_std, gamma = gamma.detach(), d, rows](BackwardContext& ctx) {
                     dispatch(normalized.dtype(), [&]<class T>(T) {
                       auto g = ctx.grad_out().data<T>();
                       auto xh = normalized.data<T>();
                       auto gs = gamma.data<T>();
                       auto is = inv_std.data<T>();
                       if (ctx.needs(1)) {
                         std::vector<T> dg(sz(d), T(0));
                         for (std::int64_t r = 0; r < rows; ++r)
                           for (std::int64_t j = 0; j < d; ++j) dg[sz(j)] += g[sz(r * d + j)] * xh[sz(r * d + j)];
                         ctx.set(1, k::make<T>(gamma.shape(), std::move(dg)));
                       }
                       if (ctx.needs(2)) ctx.set(2, k::reshape(k::sum_to_last(ctx.grad_out()), gamma.shape()));
                       if (ctx.needs(0)) {
                         std::vector<T> dx(g.size());
                         for (std::int64_t r = 0; r < rows; ++r) {
                           T mean_dh = 0, mean_dh_xh = 0;
                           for (std::int64_t j = 0; j < d; ++j) {
                             const T dh = g[sz(r * d + j)] * gs[sz(j)];
                             mean_dh += dh;
                             mean_dh_xh += dh * xh[sz(r * d + j)];
                           }
                           mean_dh /= static_cast<T>(d);
                           mean_dh_xh /= static_cast<T>(d);
                           for (std::int64_t j = 0; j < d; ++j) {
                             const T dh = g[sz(r * d + j)] * gs[sz(j)];
                             dx[sz(r * d + j)] = is[sz(r)] * (dh - mean_dh - xh[sz(r * d + j)] * mean_dh_xh);
                           }
                         }
                         ctx.set(0, k::make<T>(normalized.shape(), std::move(dx)));
                       }
                     });
                   });
}

namespace {
struct AxisLayout {
  std::int64_t outer, len, inner;
};

AxisLayout axis_layout(const Tensor& x, std::int64_t axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis out of range for shape " + to_string(x.shape()));
  AxisLayout l{1, x.shape()[sz(axis)], 1};
  for (std::int64_t i = 0; i < axis; ++i) l.outer *= x.shape()[sz(i)];
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) l.inner *= x.shape()[sz(i)];
  return l;
}
}  // namespace

Tensor softmax(const Tensor& x, std::int64_t axis) {
  const auto l = axis_layout(x, axis);
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    std::vector<T> o(xs.size());
    for (std::int64_t a = 0; a < l.outer; ++a)
      for (std::int64_t c = 0; c < l.inner; ++c) {
        const std::int64_t base = a * l.len * l.inner + c;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t i = 0; i < l.len; ++i) mx = std::max(mx, xs[sz(base + i * l.inner)]);
        T total = 0;
        for (std::int64_t i = 0; i < l.len; ++i) {
          const T e = std::exp(xs[sz(base + i * l.inner)] - mx);
          o[sz(base + i * l.inner)] = e;
          total += e;
        }
        for (std::int64_t i = 0; i < l.len; ++i) o[sz(base + i * l.inner)] /= total;
      }
    return k::make<T>(x.shape(), std::move(o));
  });
  if (!any_tracked({&x})) return out;
  return record_op(out, {&x}, [y = out.detach(), l](BackwardContext& ctx) {
    ctx.set(0, dispatch(y.dtype(), [&]<class T>(T) {
      auto ys = y.data<T>();
      auto g = ctx.grad_out().data<T>();
      std::vector<T> dx(ys.size());
      for (std::int64_t a = 0; a < l.outer; ++a)
        for (std::int64_t c = 0; c < l.inner; ++c) {
          const std::int64_t base = a * l.len * l.inner + c;
          T dot = 0;
          for (std::int64_t i = 0; i < l.len; ++i) dot += g[sz(base + i * l.inner)] * ys[sz(base + i * l.inner)];
          for (std::int64_t i = 0; i < l.len; ++i) {
            const auto idx = sz(base + i * l.inner);
            dx[idx] = ys[idx] * (g[idx] - dot);
          }
        }
      return k::make<T>(y.shape(), std::move(dx));
    }));
  });
}

Tensor sum(const Tensor& x) {
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    T total = 0;
    for (T v : x.data<T>()) total += v;
    return k::make<T>({1}, {total});
  });
  if (!any_tracked({&x})) return out;
  return record_op(std::move(out), {&x}, [shape = x.shape()](BackwardContext& ctx) {
    ctx.set(0, Tensor::full(shape, ctx.grad_out().item(), ctx.grad_out().dtype()));
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_rows(const Tensor& x) {
  k::require_rank(x, 2, "mean_rows");
  const auto n = x.dim(0);
  Tensor out = k::reshape(k::scale(k::sum_to_last(x), 1.0 / static_cast<double>(n)), {1, x.dim(1)});
  if (!any_tracked({&x})) return out;
  return record_op(std::move(out), {&x}, [n, d = x.dim(1)](BackwardContext& ctx) {
    ctx.set(0, dispatch(ctx.grad_out().dtype(), [&]<class T>(T) {
      auto g = ctx.grad_out().data<T>();
      std::vector<T> dx(sz(n * d));
      const T inv = T(1) / static_cast<T>(n);
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t j = 0; j < d; ++j) dx[sz(r * d + j)] = g[sz(j)] * inv;
      return k::make<T>({n, d}, std::move(dx));
    }));
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  k::require_rank(table, 2, "gather_rows");
  const auto n = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  for (auto id : ids)
    if (id < 0 || id >= n)
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside [0, " + std::to_string(n) + ")");
  const auto m = static_cast<std::int64_t>(ids.size());
  Tensor out = dispatch(table.dtype(), [&]<class T>(T) {
    auto ts = table.data<T>();
    std::vector<T> o(sz(m * d));
    for (std::int64_t r = 0; r < m; ++r)
      std::copy_n(ts.data() + ids[sz(r)] * d, d, o.data() + r * d);
    return k::make<T>({m, d}, std::move(o));
  });
  if (!any_tracked({&table})) return out;
  return record_op(std::move(out), {&table},
                   [ids = std::vector<std::int64_t>(ids.begin(), ids.end()), n, d](BackwardContext& ctx) {
                     ctx.set(0, dispatch(ctx.grad_out().dtype(), [&]<class T>(T) {
                       auto g = ctx.grad_out().data<T>();
                       std::vector<T> dt(sz(n * d), T(0));
                       for (std::size_t r = 0; r < ids.size(); ++r)
                         for (std::int64_t j = 0; j < d; ++j)
                           dt[sz(ids[r] * d + j)] += g[r * sz(d) + sz(j)];
                       return k::make<T>({n, d}, std::move(dt));
                     }));
                   });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto d = parts[0].dim(1);
  std::int64_t total = 0;
  std::vector<std::int64_t> rows;
  for (const auto& p : parts) {
    k::require_rank(p, 2, "concat_rows");
    k::require_same_dtype(p, parts[0], "concat_rows");
    if (p.dim(1) != d)
      throw ShapeError("concat_rows: width mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    rows.push_back(p.dim(0));
    total += p.dim(0);
  }
  Tensor out = dispatch(parts[0].dtype(), [&]<class T>(T) {
    std::vector<T> o;
    o.reserve(sz(total * d));
    for (const auto& p : parts) {
      auto ps = p.data<T>();
      o.insert(o.end(), ps.begin(), ps.end());
    }
    return k::make<T>({total, d}, std::move(o));
  });
  GradTape* tape = GradTape::active();
  if (tape == nullptr || !grad_enabled()) return out;
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || tape->tracks(p);
  if (!tracked) return out;
  return tape->record(std::move(out), parts, [rows, d](BackwardContext& ctx) {
    dispatch(ctx.grad_out().dtype(), [&]<class T>(T) {
      auto g = ctx.grad_out().data<T>();
      std::int64_t offset = 0;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (ctx.needs(i)) {
          std::vector<T> part(g.begin() + offset * d, g.begin() + (offset + rows[i]) * d);
          ctx.set(i, k::make<T>({rows[i], d}, std::move(part)));
        }
        offset += rows[i];
      }
    });
  });
}

Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t count) {
  k::require_rank(x, 2, "slice_rows");
  const auto n = x.dim(0), d = x.dim(1);
  if (begin < 0 || count <= 0 || begin + count > n)
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + to_string(x.shape()));
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    return k::make<T>({count, d}, std::vector<T>(xs.begin() + begin * d, xs.begin() + (begin + count) * d));
  });
  if (!any_tracked({&x})) return out;
  return record_op(std::move(out), {&x}, [begin, count, n, d](BackwardContext& ctx) {
    ctx.set(0, dispatch(ctx.grad_out().dtype(), [&]<class T>(T) {
      auto g = ctx.grad_out().data<T>();
      std::vector<T> dx(sz(n * d), T(0));
      std::copy(g.begin(), g.end(), dx.begin() + begin * d);
      (void)count;
      return k::make<T>({n, d}, std::move(dx));
    }));
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels) {
  k::require_rank(logits, 2, "cross_entropy");
  const auto n = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  for (auto l : labels)
    if (l < 0 || l >= c)
      throw IndexError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
  Tensor probs;
  Tensor out = dispatch(logits.dtype(), [&]<class T>(T) {
    auto xs = logits.data<T>();
    std::vector<T> p(xs.size());
    T total = 0;
    for (std::int64_t r = 0; r < n; ++r) {
      const T* row = xs.data() + r * c;
      T mx = row[0];
      for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T z = 0;
      for (std::int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < c; ++j) p[sz(r * c + j)] = std::exp(row[j] - mx) / z;
      total += std::log(z) + mx - row[labels[sz(r)]];
    }
    probs = k::make<T>(logits.shape(), std::move(p));
    return k::make<T>({1}, {total / static_cast<T>(n)});
  });
  if (!any_tracked({&logits})) return out;
  return record_op(std::move(out), {&logits},
                   [probs, labels = std::vector<std::int64_t>(labels.begin(), labels.end()), n, c](BackwardContext& ctx) {
                     ctx.set(0, dispatch(probs.dtype(), [&]<class T>(T) {
                       auto p = probs.data<T>();
                       const T g = static_cast<T>(ctx.grad_out().item()) / static_cast<T>(n);
                       std::vector<T> dx(p.size());
                       for (std::int64_t r = 0; r < n; ++r)
                         for (std::int64_t j = 0; j < c; ++j)
                           dx[sz(r * c + j)] = (p[sz(r * c + j)] - (j == labels[sz(r)] ? T(1) : T(0))) * g;
                       return k::make<T>({n, c}, std::move(dx));
                     }));
                   });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  k::require_same_shape(pred, target, "mse");
  Tensor diff = k::sub(pred, target);
  Tensor out = dispatch(pred.dtype(), [&]<class T>(T) {
    T total = 0;
    for (T v : diff.data<T>()) total += v * v;
    return k::make<T>({1}, {total / static_cast<T>(diff.numel())});
  });
  if (!any_tracked({&pred, &target})) return out;
  return record_op(std::move(out), {&pred, &target}, [diff](BackwardContext& ctx) {
    const double g = ctx.grad_out().item() * 2.0 / static_cast<double>(diff.numel());
    Tensor dp = k::scale(diff, g);
    if (ctx.needs(1)) ctx.set(1, k::neg(dp));
    if (ctx.needs(0)) ctx.set(0, std::move(dp));
  });
}

namespace {

// Per segment pair and head, forward attention on strided views into packed
// [N×d] matrices.
template <class T>
struct AttnDims {
  std::int64_t d, dh, heads;
  T scale;
};

template <class T>
void attention_forward_block(const AttnDims<T>& dims, const T* q, const T* kk, const T* v, Segment qs, Segment ks,
                             bool causal, T* out, T* probs) {
  const auto d = dims.d, dh = dims.dh;
  const auto nq = qs.length, nk = ks.length;
  std::vector<T> kt(sz(dh * nk));
  for (std::int64_t h = 0; h < dims.heads; ++h) {
    for (std::int64_t j = 0; j < nk; ++j)
      for (std::int64_t c = 0; c < dh; ++c) kt[sz(c * nk + j)] = kk[(ks.begin + j) * d + h * dh + c];
    T* p = probs + h * nq * nk;
    k::gemm_nn<T>(nq, nk, dh, q + qs.begin * d + h * dh, d, kt.data(), nk, p, nk);
    for (std::int64_t i = 0; i < nq; ++i) {
      T* row = p + i * nk;
      const std::int64_t visible = causal ? std::min(nk, i + 1) : nk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < visible; ++j) {
        row[j] *= dims.scale;
        mx = std::max(mx, row[j]);
      }
      T total = 0;
      for (std::int64_t j = 0; j < visible; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (std::int64_t j = 0; j < visible; ++j) row[j] /= total;
      for (std::int64_t j = visible; j < nk; ++j) row[j] = T(0);
    }
    k::gemm_nn<T>(nq, dh, nk, p, nk, v + ks.begin * d + h * dh, d, out + qs.begin * d + h * dh, d);
  }
}

template <class T>
void attention_backward_block(const AttnDims<T>& dims, const T* q, const T* kk, const T* v, const T* gout,
                              Segment qs, Segment ks, const T* probs, T* dq, T* dk, T* dv) {
  const auto d = dims.d, dh = dims.dh;
  const auto nq = qs.length, nk = ks.length;
  std::vector<T> vt(sz(dh * nk)), pt(sz(nk * nq)), dp(sz(nq * nk)), tmp(sz(std::max(nq, nk) * dh)),
      qh(sz(nq * dh));
  for (std::int64_t h = 0; h < dims.heads; ++h) {
    const T* p = probs + h * nq * nk;
    const T* go = gout + qs.begin * d + h * dh;
    for (std::int64_t j = 0; j < nk; ++j)
      for (std::int64_t c = 0; c < dh; ++c) vt[sz(c * nk + j)] = v[(ks.begin + j) * d + h * dh + c];
    // dP = dO·Vᵀ
    k::gemm_nn<T>(nq, nk, dh, go, d, vt.data(), nk, dp.data(), nk);
    if (dv != nullptr) {
      k::transpose<T>(nq, nk, p, pt.data());
      k::gemm_nn<T>(nk, dh, nq, pt.data(), nq, go, d, tmp.data(), dh);
      for (std::int64_t j = 0; j < nk; ++j)
        for (std::int64_t c = 0; c < dh; ++c) dv[(ks.begin + j) * d + h * dh + c] += tmp[sz(j * dh + c)];
    }
    // dS = P∘(dP − rowsum(dP∘P)), folded with the score scale.
    for (std::int64_t i = 0; i < nq; ++i) {
      T dot = 0;
      for (std::int64_t j = 0; j < nk; ++j) dot += dp[sz(i * nk + j)] * p[i * nk + j];
      for (std::int64_t j = 0; j < nk; ++j) dp[sz(i * nk + j)] = p[i * nk + j] * (dp[sz(i * nk + j)] - dot) * dims.scale;
    }
    if (dq != nullptr) {
      k::gemm_nn<T>(nq, dh, nk, dp.data(), nk, kk + ks.begin * d + h * dh, d, tmp.data(), dh);
      for (std::int64_t i = 0; i < nq; ++i)
        for (std::int64_t c = 0; c < dh; ++c) dq[(qs.begin + i) * d + h * dh + c] += tmp[sz(i * dh + c)];
    }
    if (dk != nullptr) {
      k::transpose<T>(nq, nk, dp.data(), pt.data());
      for (std::int64_t i = 0; i < nq; ++i)
        for (std::int64_t c = 0; c < dh; ++c) qh[sz(i * dh + c)] = q[(qs.begin + i) * d + h * dh + c];
      k::gemm_nn<T>(nk, dh, nq, pt.data(), nq, qh.data(), dh, tmp.data(), dh);
      for (std::int64_t j = 0; j < nk; ++j)
        for (std::int64_t c = 0; c < dh; ++c) dk[(ks.begin + j) * d + h * dh + c] += tmp[sz(j * dh + c)];
    }
  }
}

void validate_segments(std::span<const Segment> segs, std::int64_t rows, const char* what) {
  for (const auto& s : segs)
    if (s.begin < 0 || s.length <= 0 || s.begin + s.length > rows)
      throw ShapeError(std::string("attention: ") + what + " segment [" + std::to_string(s.begin) + ", " +
                       std::to_string(s.begin + s.length) + ") outside " + std::to_string(rows) + " rows");
}

}  // namespace

AttentionResult attention(const Tensor& q, const Tensor& kmat, const Tensor& v, std::int64_t heads,
                          std::span<const Segment> q_segments, std::span<const Segment> kv_segments, bool causal) {
  k::require_rank(q, 2, "attention");
  k::require_rank(kmat, 2, "attention");
  k::require_same_shape(kmat, v, "attention");
  k::require_same_dtype(q, kmat, "attention");
  const auto d = q.dim(1);
  if (kmat.dim(1) != d) throw ShapeError("attention: query width " + std::to_string(d) + " != key width");
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (q_segments.size() != kv_segments.size()) throw ShapeError("attention: segment lists differ in length");
  validate_segments(q_segments, q.dim(0), "query");
  validate_segments(kv_segments, kmat.dim(0), "key");
  if (causal)
    for (std::size_t s = 0; s < q_segments.size(); ++s)
      if (q_segments[s].length != kv_segments[s].length)
        throw ShapeError("attention: causal segments must be square");

  AttentionResult result;
  result.out = dispatch(q.dtype(), [&]<class T>(T) {
    const AttnDims<T> dims{d, d / heads, heads, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)))};
    std::vector<T> out(sz(q.numel()), T(0));
    for (std::size_t s = 0; s < q_segments.size(); ++s) {
      const auto nq = q_segments[s].length, nk = kv_segments[s].length;
      std::vector<T> probs(sz(heads * nq * nk));
      attention_forward_block<T>(dims, q.data<T>().data(), kmat.data<T>().data(), v.data<T>().data(), q_segments[s],
                                 kv_segments[s], causal, out.data(), probs.data());
      result.probs.push_back(k::make<T>({heads, nq, nk}, std::move(probs)));
    }
    return k::make<T>(q.shape(), std::move(out));
  });
  if (!any_tracked({&q, &kmat, &v})) return result;
  result.out = record_op(
      std::move(result.out), {&q, &kmat, &v},
      [q = q.detach(), kk = kmat.detach(), v = v.detach(), heads, probs = result.probs,
       qsegs = std::vector<Segment>(q_segments.begin(), q_segments.end()),
       ksegs = std::vector<Segment>(kv_segments.begin(), kv_segments.end())](BackwardContext& ctx) {
        dispatch(q.dtype(), [&]<class T>(T) {
          const auto d = q.dim(1);
          const AttnDims<T> dims{d, d / heads, heads, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)))};
          std::vector<T> dq(ctx.needs(0) ? sz(q.numel()) : 0, T(0));
          std::vector<T> dk(ctx.needs(1) ? sz(kk.numel()) : 0, T(0));
          std::vector<T> dv(ctx.needs(2) ? sz(v.numel()) : 0, T(0));
          for (std::size_t s = 0; s < qsegs.size(); ++s)
            attention_backward_block<T>(dims, q.data<T>().data(), kk.data<T>().data(), v.data<T>().data(),
                                        ctx.grad_out().data<T>().data(), qsegs[s], ksegs[s],
                                        probs[s].data<T>().data(), ctx.needs(0) ? dq.data() : nullptr,
                                        ctx.needs(1) ? dk.data() : nullptr, ctx.needs(2) ? dv.data() : nullptr);
          if (ctx.needs(0)) ctx.set(0, k::make<T>(q.shape(), std::move(dq)));
          if (ctx.needs(1)) ctx.set(1, k::make<T>(kk.shape(), std::move(dk)));
          if (ctx.needs(2)) ctx.set(2, k::make<T>(v.shape(), std::move(dv)));
        });
      });
  return result;
}

std::vector<std::int64_t> argmax_rows(const Tensor& x) {
  k::require_rank(x, 2, "argmax_rows");
  const auto n = x.dim(0), c = x.dim(1);
  std::vector<std::int64_t> out(sz(n));
  for (std::int64_t r = 0; r < n; ++r) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (x.value(r * c + j) > x.value(r * c + best)) best = j;
    out[sz(r)] = best;
  }
  return out;
}

Tensor one_hot(std::span<const std::int64_t> ids, std::int64_t classes, DType dtype) {
  const auto n = static_cast<std::int64_t>(ids.size());
  Tensor out = Tensor::zeros({n, classes}, dtype);
  dispatch(dtype, [&]<class T>(T) {
    auto o = out.mutable_data<T>();
    for (std::int64_t r = 0; r < n; ++r) {
      if (ids[sz(r)] < 0 || ids[sz(r)] >= classes) throw IndexError("one_hot: id out of range");
      o[sz(r * classes + ids[sz(r)])] = T(1);
    }
  });
  return out;
}

}  // namespace ivcl
