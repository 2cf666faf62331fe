#pragma once

// Differentiable primitives. Every op records its own backward rule through
// make_result; nothing here knows about layers or models.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "monoformer/tensor.hpp"

namespace monoformer {

namespace detail {

// Order-independent sum: terms are added in ascending order.
inline double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

// Index maps from output elements to operand elements under numpy-style
// broadcasting. Empty maps mean "same index".
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_idx, b_idx;
  bool a_same = true, b_same = true;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    p.out[i] = std::max(pa[i], pb[i]);
  }
  const std::size_t n = shape_numel(p.out);
  p.a_same = (pa == p.out);
  p.b_same = (pb == p.out);
  auto build = [&](const Shape& ps, std::vector<std::size_t>& idx) {
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
      stride[i] = ps[i] == 1 ? 0 : s;
      s *= ps[i];
    }
    idx.resize(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < n; ++k) {
      idx[k] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++counter[d];
        off += stride[d];
        if (counter[d] < p.out[d]) break;
        off -= stride[d] * counter[d];
        counter[d] = 0;
      }
    }
  };
  if (!p.a_same) build(pa, p.a_idx);
  if (!p.b_same) build(pb, p.b_idx);
  return p;
}

template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = shape_numel(plan->out);
  std::vector<double> out(n);
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[plan->a_same ? i : plan->a_idx[i]];
    const double yi = y[plan->b_same ? i : plan->b_idx[i]];
    out[i] = f(xi, yi);
  }
  TensorImpl* ai = a.impl().get();
  TensorImpl* bi = b.impl().get();
  return make_result(name, plan->out, std::move(out), {a, b}, [ai, bi, plan, dfa, dfb](TensorImpl& o) {
    const std::size_t n = o.data.size();
    double* ga = ai->requires_grad ? ai->grad_buffer() : nullptr;
    double* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ia = plan->a_same ? i : plan->a_idx[i];
      const std::size_t ib = plan->b_same ? i : plan->b_idx[i];
      const double xi = ai->data[ia], yi = bi->data[ib], g = o.grad[i];
      if (ga) ga[ia] += g * dfa(xi, yi, o.data[i]);
      if (gb) gb[ib] += g * dfb(xi, yi, o.data[i]);
    }
  });
}

template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.numel());
  const auto& v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(v[i]);
  TensorImpl* xi = x.impl().get();
  return make_result(name, x.shape(), std::move(out), {x}, [xi, df](TensorImpl& o) {
    double* g = xi->grad_buffer();
    for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i] * df(xi->data[i], o.data[i]);
  });
}

// out[i] = x[map[i]]; the adjoint scatters back.
inline Tensor gather(const char* name, const Tensor& x, Shape shape, std::vector<std::size_t> map) {
  std::vector<double> out(map.size());
  const auto& v = x.values();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = v[map[i]];
  auto m = std::make_shared<std::vector<std::size_t>>(std::move(map));
  TensorImpl* xi = x.impl().get();
  return make_result(name, std::move(shape), std::move(out), {x}, [xi, m](TensorImpl& o) {
    double* g = xi->grad_buffer();
    for (std::size_t i = 0; i < m->size(); ++i) g[(*m)[i]] += o.grad[i];
  });
}

// Splits shape around `axis` into (outer, extent, inner).
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---- elementwise arithmetic ----------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::unary_op("mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---- unary functions -----------------------------------------------------

inline Tensor exp(const Tensor& x) {
  return detail::unary_op("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary_op("sqrt", x, [](double v) { return std::sqrt(v); },
                          [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// Subgradient 0 at the origin.
inline Tensor abs(const Tensor& x) {
  return detail::unary_op("abs", x, [](double v) { return std::abs(v); },
                          [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op("tanh", x, [](double v) { return std::tanh(v); },
                          [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                          [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

// Exact GELU x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  return detail::unary_op(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

// ---- reductions ----------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  TensorImpl* xi = x.impl().get();
  return make_result("sum", Shape{1}, {s}, {x}, [xi](TensorImpl& o) {
    double* g = xi->grad_buffer();
    for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = true) {
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  Shape s = x.shape();
  if (keepdim) {
    s[axis] = 1;
  } else {
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    if (s.empty()) s = {1};
  }
  std::vector<double> out(outer * inner, 0.0);
  const auto& v = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < extent; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * extent + k) * inner + i];
  TensorImpl* xi = x.impl().get();
  return make_result("sum_axis", std::move(s), std::move(out), {x}, [xi, outer, extent, inner](TensorImpl& o) {
    double* g = xi->grad_buffer();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t k = 0; k < extent; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[(a * extent + k) * inner + i] += o.grad[a * inner + i];
  });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = true) {
  return mul_scalar(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---- shape manipulation --------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  TensorImpl* xi = x.impl().get();
  return make_result("reshape", std::move(shape), x.values(), {x}, [xi](TensorImpl& o) {
    double* g = xi->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

// out axis i is input axis order[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (order.size() != r) throw DimensionError("permute order rank mismatch for " + shape_str(in));
  std::vector<std::size_t> in_stride(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = s;
    s *= in[i];
  }
  Shape out(r);
  std::vector<std::size_t> stride(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (order[i] >= r || used[order[i]]) throw DimensionError("permute order is not a permutation");
    used[order[i]] = true;
    out[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < n; ++k) {
    map[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      off += stride[d];
      if (counter[d] < out[d]) break;
      off -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return detail::gather("permute", x, std::move(out), std::move(map));
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  if (begin >= end || end > extent)
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         shape_str(x.shape()));
  Shape s = x.shape();
  s[axis] = end - begin;
  std::vector<std::size_t> map;
  map.reserve(outer * (end - begin) * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = begin; k < end; ++k)
      for (std::size_t i = 0; i < inner; ++i) map.push_back((o * extent + k) * inner + i);
  return detail::gather("slice", x, std::move(s), std::move(map));
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape s = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = s;
    if (a.size() != b.size() || axis >= a.size())
      throw DimensionError("concat rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(s));
    total += p.dim(axis);
  }
  s[axis] = total;
  const auto [outer, extent, inner] = detail::split_axis(s, axis);
  std::vector<double> out(shape_numel(s));
  std::vector<std::size_t> starts;
  std::size_t start = 0;
  for (const auto& p : parts) {
    starts.push_back(start);
    const std::size_t e = p.dim(axis);
    const auto& v = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < e; ++k)
        for (std::size_t i = 0; i < inner; ++i) out[(o * extent + start + k) * inner + i] = v[(o * e + k) * inner + i];
    start += e;
  }
  std::vector<TensorImpl*> impls;
  for (const auto& p : parts) impls.push_back(p.impl().get());
  return make_result("concat", s, std::move(out), parts,
                     [impls, starts, axis, outer = outer, extent = extent, inner = inner](TensorImpl& o) {
                       for (std::size_t j = 0; j < impls.size(); ++j) {
                         TensorImpl* p = impls[j];
                         if (!p->requires_grad) continue;
                         const std::size_t e = p->shape[axis];
                         double* g = p->grad_buffer();
                         for (std::size_t a = 0; a < outer; ++a)
                           for (std::size_t k = 0; k < e; ++k)
                             for (std::size_t i = 0; i < inner; ++i)
                               g[(a * e + k) * inner + i] += o.grad[(a * extent + starts[j] + k) * inner + i];
                       }
                     });
}

// ---- linear algebra ------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) terms[p] = A[i * k + p] * B[p * n + j];
      out[i * n + j] = detail::sorted_sum(terms);
    }
  TensorImpl* ai = a.impl().get();
  TensorImpl* bi = b.impl().get();
  return make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl& o) {
    const double* G = o.grad.data();
    if (ai->requires_grad) {
      double* ga = ai->grad_buffer();
      const double* Bv = bi->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * Bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (bi->requires_grad) {
      double* gb = bi->grad_buffer();
      const double* Av = ai->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = Av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

// ---- normalization -------------------------------------------------------

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto& v = x.values();
  std::vector<double> terms(extent);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < extent; ++k) mx = std::max(mx, v[(o * extent + k) * inner + i]);
      for (std::size_t k = 0; k < extent; ++k) {
        const std::size_t idx = (o * extent + k) * inner + i;
        out[idx] = std::exp(v[idx] - mx);
        terms[k] = out[idx];
      }
      const double s = detail::sorted_sum(terms);
      for (std::size_t k = 0; k < extent; ++k) out[(o * extent + k) * inner + i] /= s;
    }
  TensorImpl* xi = x.impl().get();
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [xi, outer = outer, extent = extent, inner = inner](TensorImpl& o) {
                       double* g = xi->grad_buffer();
                       for (std::size_t a = 0; a < outer; ++a)
                         for (std::size_t i = 0; i < inner; ++i) {
                           double dot = 0.0;
                           for (std::size_t k = 0; k < extent; ++k) {
                             const std::size_t idx = (a * extent + k) * inner + i;
                             dot += o.grad[idx] * o.data[idx];
                           }
                           for (std::size_t k = 0; k < extent; ++k) {
                             const std::size_t idx = (a * extent + k) * inner + i;
                             g[idx] += o.data[idx] * (o.grad[idx] - dot);
                           }
                         }
                     });
}

// Normalizes over the last axis, then applies per-feature gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (!(eps > 0)) throw ContractError("layer_norm eps must be positive");
  const std::size_t c = x.shape().back();
  if (gain.numel() != c || bias.numel() != c)
    throw DimensionError("layer_norm gain/bias must have " + std::to_string(c) + " entries");
  const std::size_t rows = x.numel() / c;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto& v = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += v[r * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (v[r * c + j] - mu) * (v[r * c + j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (v[r * c + j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  TensorImpl* xi = x.impl().get();
  TensorImpl* gi = gain.impl().get();
  TensorImpl* bi = bias.impl().get();
  return make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                     [xi, gi, bi, xhat, inv_std, rows, c](TensorImpl& o) {
                       const double* G = o.grad.data();
                       if (gi->requires_grad) {
                         double* gg = gi->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < c; ++j) gg[j] += G[r * c + j] * (*xhat)[r * c + j];
                       }
                       if (bi->requires_grad) {
                         double* gb = bi->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < c; ++j) gb[j] += G[r * c + j];
                       }
                       if (xi->requires_grad) {
                         double* gx = xi->grad_buffer();
                         const double inv_c = 1.0 / static_cast<double>(c);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dh = G[r * c + j] * gi->data[j];
                             s1 += dh;
                             s2 += dh * (*xhat)[r * c + j];
                           }
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dh = G[r * c + j] * gi->data[j];
                             gx[r * c + j] +=
                                 (*inv_std)[r] * (dh - inv_c * s1 - (*xhat)[r * c + j] * inv_c * s2);
                           }
                         }
                       }
                     });
}

// ---- spatial ops on C x H x W maps ---------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation. x: [C,H,W], w: [O,C,k,k], b: [O] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
                     std::size_t pad = 0) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3))
    throw DimensionError("conv2d shape mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(w.shape()));
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), K = w.dim(2);
  if (K > H + 2 * pad || K > W + 2 * pad)
    throw DimensionError("conv2d kernel " + std::to_string(K) + " larger than padded input " + shape_str(x.shape()));
  if (b.defined() && b.numel() != O) throw DimensionError("conv2d bias must have " + std::to_string(O) + " entries");
  const std::size_t Ho = conv_out_extent(H, K, stride, pad), Wo = conv_out_extent(W, K, stride, pad);
  std::vector<double> out(O * Ho * Wo, 0.0);
  const double* X = x.values().data();
  const double* Wt = w.values().data();
  const long ip = static_cast<long>(pad);
  for (std::size_t o = 0; o < O; ++o) {
    double* orow = out.data() + o * Ho * Wo;
    if (b.defined()) std::fill(orow, orow + Ho * Wo, b.values()[o]);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          const double wv = Wt[((o * C + c) * K + ky) * K + kx];
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - ip;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const double* xrow = X + (c * H + static_cast<std::size_t>(iy)) * W;
            double* dst = orow + oy * Wo;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - ip;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              dst[ox] += wv * xrow[ix];
            }
          }
        }
  }
  TensorImpl* xi = x.impl().get();
  TensorImpl* wi = w.impl().get();
  TensorImpl* bi = b.defined() ? b.impl().get() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result("conv2d", Shape{O, Ho, Wo}, std::move(out), std::move(inputs),
                     [=](TensorImpl& res) {
                       const double* G = res.grad.data();
                       if (bi && bi->requires_grad) {
                         double* gb = bi->grad_buffer();
                         for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t i = 0; i < Ho * Wo; ++i) gb[o] += G[o * Ho * Wo + i];
                       }
                       double* gx = xi->requires_grad ? xi->grad_buffer() : nullptr;
                       double* gw = wi->requires_grad ? wi->grad_buffer() : nullptr;
                       const double* Xv = xi->data.data();
                       const double* Wv = wi->data.data();
                       for (std::size_t o = 0; o < O; ++o)
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t ky = 0; ky < K; ++ky)
                             for (std::size_t kx = 0; kx < K; ++kx) {
                               const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                               const double wv = Wv[widx];
                               double acc = 0.0;
                               for (std::size_t oy = 0; oy < Ho; ++oy) {
                                 const long iy = static_cast<long>(oy * stride + ky) - ip;
                                 if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                 const std::size_t xoff = (c * H + static_cast<std::size_t>(iy)) * W;
                                 const double* grow = G + (o * Ho + oy) * Wo;
                                 for (std::size_t ox = 0; ox < Wo; ++ox) {
                                   const long ix = static_cast<long>(ox * stride + kx) - ip;
                                   if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                   acc += grow[ox] * Xv[xoff + static_cast<std::size_t>(ix)];
                                   if (gx) gx[xoff + static_cast<std::size_t>(ix)] += grow[ox] * wv;
                                 }
                               }
                               if (gw) gw[widx] += acc;
                             }
                     });
}

// Bilinear x2 upsampling with half-pixel centers and edge clamping.
inline Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("upsample2x expects [C,H,W], got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t n_in, std::size_t n_out) {
    std::vector<Tap> t(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, n_in - 1);
      t[o] = {i0, i1, s - static_cast<double>(i0)};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(H, Ho));
  auto tx = std::make_shared<std::vector<Tap>>(taps(W, Wo));
  std::vector<double> out(C * Ho * Wo);
  const auto& v = x.values();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const Tap& a = (*ty)[oy];
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const Tap& b = (*tx)[ox];
        const double* p = v.data() + c * H * W;
        const double top = p[a.i0 * W + b.i0] * (1 - b.w1) + p[a.i0 * W + b.i1] * b.w1;
        const double bot = p[a.i1 * W + b.i0] * (1 - b.w1) + p[a.i1 * W + b.i1] * b.w1;
        out[(c * Ho + oy) * Wo + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  TensorImpl* xi = x.impl().get();
  return make_result("upsample2x", Shape{C, Ho, Wo}, std::move(out), {x}, [=](TensorImpl& o) {
    double* g = xi->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        const Tap& a = (*ty)[oy];
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const Tap& b = (*tx)[ox];
          const double gv = o.grad[(c * Ho + oy) * Wo + ox];
          double* p = g + c * H * W;
          p[a.i0 * W + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
          p[a.i0 * W + b.i1] += gv * (1 - a.w1) * b.w1;
          p[a.i1 * W + b.i0] += gv * a.w1 * (1 - b.w1);
          p[a.i1 * W + b.i1] += gv * a.w1 * b.w1;
        }
      }
  });
}

namespace detail {
// Integer cell and fractional offset of a sample coordinate. Coordinates
// within 1e-9 px of a grid point land exactly on it.
inline std::pair<long, double> split_coordinate(double c) {
  const double r = std::round(c);
  if (std::abs(c - r) < 1e-9) return {static_cast<long>(r), 0.0};
  const double f = std::floor(c);
  return {static_cast<long>(f), c - f};
}
}  // namespace detail

// Bilinear sampling of img [C,H,W] at pixel coordinates (u, v), each [h,w].
// Corners outside the image contribute zero. Differentiable in img, u and v.
inline Tensor grid_sample(const Tensor& img, const Tensor& u, const Tensor& v) {
  if (img.rank() != 3 || u.rank() != 2 || u.shape() != v.shape())
    throw DimensionError("grid_sample shape mismatch: image " + shape_str(img.shape()) + ", coords " +
                         shape_str(u.shape()) + "/" + shape_str(v.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::size_t h = u.dim(0), w = u.dim(1), n = h * w;
  const auto& I = img.values();
  const auto& U = u.values();
  const auto& V = v.values();
  auto pixel = [&](std::size_t c, long y, long x) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return 0.0;
    return I[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
  };
  std::vector<double> out(C * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [x0, ax] = detail::split_coordinate(U[i]);
    const auto [y0, ay] = detail::split_coordinate(V[i]);
    for (std::size_t c = 0; c < C; ++c) {
      out[c * n + i] = (1 - ay) * ((1 - ax) * pixel(c, y0, x0) + ax * pixel(c, y0, x0 + 1)) +
                       ay * ((1 - ax) * pixel(c, y0 + 1, x0) + ax * pixel(c, y0 + 1, x0 + 1));
    }
  }
  TensorImpl* ii = img.impl().get();
  TensorImpl* ui = u.impl().get();
  TensorImpl* vi = v.impl().get();
  return make_result("grid_sample", Shape{C, h, w}, std::move(out), {img, u, v}, [=](TensorImpl& o) {
    const auto& Iv = ii->data;
    auto px = [&](std::size_t c, long y, long x) -> double {
      if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return 0.0;
      return Iv[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
    };
    double* gi = ii->requires_grad ? ii->grad_buffer() : nullptr;
    double* gu = ui->requires_grad ? ui->grad_buffer() : nullptr;
    double* gv = vi->requires_grad ? vi->grad_buffer() : nullptr;
    auto scatter = [&](std::size_t c, long y, long x, double val) {
      if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return;
      gi[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)] += val;
    };
    for (std::size_t i = 0; i < n; ++i) {
      const auto [x0, ax] = detail::split_coordinate(ui->data[i]);
      const auto [y0, ay] = detail::split_coordinate(vi->data[i]);
      for (std::size_t c = 0; c < C; ++c) {
        const double g = o.grad[c * n + i];
        if (g == 0.0) continue;
        const double p00 = px(c, y0, x0), p01 = px(c, y0, x0 + 1);
        const double p10 = px(c, y0 + 1, x0), p11 = px(c, y0 + 1, x0 + 1);
        if (gu) gu[i] += g * ((1 - ay) * (p01 - p00) + ay * (p11 - p10));
        if (gv) gv[i] += g * ((1 - ax) * (p10 - p00) + ax * (p11 - p01));
        if (gi) {
          scatter(c, y0, x0, g * (1 - ay) * (1 - ax));
          scatter(c, y0, x0 + 1, g * (1 - ay) * ax);
          scatter(c, y0 + 1, x0, g * ay * (1 - ax));
          scatter(c, y0 + 1, x0 + 1, g * ay * ax);
        }
      }
    }
  });
}

}  // namespace monoformer
