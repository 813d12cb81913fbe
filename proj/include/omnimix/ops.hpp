#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>
#include <vector>

#include "omnimix/tensor.hpp"

namespace omnimix {

// ---------------------------------------------------------------------------
// Shape helpers

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

template <typename T>
[[noreturn]] void throw_not_twice_differentiable(std::string_view op) {
  throw ContractError("higher-order gradient through " + std::string(op) +
                      " is not supported");
}

// Marks `out` as produced by an op whose own derivative is not implemented.
template <typename T>
Tensor<T> record_terminal(Tensor<T> out, std::vector<Tensor<T>> inputs,
                          std::string_view label) {
  return record(std::move(out), std::move(inputs), label,
                [label](const Tensor<T>&, const std::vector<Tensor<T>>&,
                        const std::vector<bool>&) -> std::vector<Tensor<T>> {
                  throw_not_twice_differentiable<T>(label);
                });
}

}  // namespace detail

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Tensor<T> out = x.view_as(std::move(shape));
  return record(std::move(out), {x}, "reshape",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{reshape(g, in[0].shape())};
                });
}

// ---------------------------------------------------------------------------
// Leading-axis broadcast and its adjoint

/// Sums leading axes of `x` away so the result has `shape` (a suffix of
/// x.shape()).
template <typename T>
Tensor<T> sum_leading(const Tensor<T>& x, const Shape& shape);

/// Repeats `x` along new leading axes so the result has `shape`.
template <typename T>
Tensor<T> tile_leading(const Tensor<T>& x, const Shape& shape) {
  if (!detail::is_suffix(x.shape(), shape)) {
    throw ShapeError("cannot tile " + to_string(x.shape()) + " to " +
                     to_string(shape));
  }
  if (x.shape() == shape) return x;
  const std::size_t inner = x.size();
  const std::size_t reps = numel(shape) / inner;
  std::vector<T> out(numel(shape));
  auto src = x.data();
  for (std::size_t r = 0; r < reps; ++r) {
    std::copy(src.begin(), src.end(), out.begin() + r * inner);
  }
  return record(Tensor<T>(shape, std::move(out)), {x}, "tile_leading",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{sum_leading(g, in[0].shape())};
                });
}

template <typename T>
Tensor<T> sum_leading(const Tensor<T>& x, const Shape& shape) {
  if (!detail::is_suffix(shape, x.shape())) {
    throw ShapeError("cannot reduce " + to_string(x.shape()) + " to " +
                     to_string(shape));
  }
  if (x.shape() == shape) return x;
  const std::size_t inner = numel(shape);
  const std::size_t reps = x.size() / inner;
  std::vector<T> out(inner, T(0));
  auto src = x.data();
  for (std::size_t r = 0; r < reps; ++r) {
    const T* row = src.data() + r * inner;
    for (std::size_t j = 0; j < inner; ++j) out[j] += row[j];
  }
  return record(Tensor<T>(shape, std::move(out)), {x}, "sum_leading",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{tile_leading(g, in[0].shape())};
                });
}

// ---------------------------------------------------------------------------
// General size-1 broadcast (same rank) and its adjoint

template <typename T>
Tensor<T> reduce_to(const Tensor<T>& x, const Shape& shape);

/// Expands size-1 axes of `x` to match `shape` (equal rank required).
template <typename T>
Tensor<T> expand(const Tensor<T>& x, const Shape& shape) {
  if (x.rank() != shape.size()) {
    throw ShapeError("expand needs equal rank: " + to_string(x.shape()) +
                     " vs " + to_string(shape));
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (x.dim(i) != shape[i] && x.dim(i) != 1) {
      throw ShapeError("cannot expand " + to_string(x.shape()) + " to " +
                       to_string(shape));
    }
  }
  if (x.shape() == shape) return x;
  auto in_strides = detail::strides_of(x.shape());
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (x.dim(i) == 1) in_strides[i] = 0;
  }
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  auto src = x.data();
  std::size_t offset = 0;
  const std::size_t r = shape.size();
  const std::size_t inner = shape[r - 1];
  const std::size_t inner_step = in_strides[r - 1];
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] = src[offset + j * inner_step];
    for (std::size_t a = r - 1; a-- > 0;) {
      ++idx[a];
      offset += in_strides[a];
      if (idx[a] < shape[a]) break;
      offset -= in_strides[a] * shape[a];
      idx[a] = 0;
    }
  }
  return record(Tensor<T>(shape, std::move(out)), {x}, "expand",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{reduce_to(g, in[0].shape())};
                });
}

/// Sums over axes where `shape` has extent 1 (equal rank required).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& x, const Shape& shape) {
  if (x.rank() != shape.size()) {
    throw ShapeError("reduce_to needs equal rank: " + to_string(x.shape()) +
                     " vs " + to_string(shape));
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (x.dim(i) != shape[i] && shape[i] != 1) {
      throw ShapeError("cannot reduce " + to_string(x.shape()) + " to " +
                       to_string(shape));
    }
  }
  if (x.shape() == shape) return x;
  auto out_strides = detail::strides_of(shape);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 1) out_strides[i] = 0;
  }
  const auto& full = x.shape();
  std::vector<T> out(numel(shape), T(0));
  std::vector<std::size_t> idx(full.size(), 0);
  auto src = x.data();
  std::size_t offset = 0;
  const std::size_t r = full.size();
  const std::size_t inner = full[r - 1];
  const std::size_t inner_step = out_strides[r - 1];
  for (std::size_t i = 0; i < src.size(); i += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[offset + j * inner_step] += src[i + j];
    for (std::size_t a = r - 1; a-- > 0;) {
      ++idx[a];
      offset += out_strides[a];
      if (idx[a] < full[a]) break;
      offset -= out_strides[a] * full[a];
      idx[a] = 0;
    }
  }
  return record(Tensor<T>(shape, std::move(out)), {x}, "reduce_to",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{expand(g, in[0].shape())};
                });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops. One operand may have a shape that is a suffix of the
// other's; it is then repeated along the missing leading axes.

namespace detail {

template <typename T, typename F>
Tensor<T> binary_kernel(const Tensor<T>& a, const Tensor<T>& b, F f,
                        std::string_view op) {
  const bool a_big = is_suffix(b.shape(), a.shape());
  if (!a_big && !is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()) +
                     " are not leading-axis broadcast compatible");
  }
  const Shape& shape = a_big ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  if (na == nb) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
  } else if (na > nb) {
    for (std::size_t o = 0; o < n; o += nb) {
      for (std::size_t j = 0; j < nb; ++j) out[o + j] = f(pa[o + j], pb[j]);
    }
  } else {
    for (std::size_t o = 0; o < n; o += na) {
      for (std::size_t j = 0; j < na; ++j) out[o + j] = f(pa[j], pb[o + j]);
    }
  }
  return Tensor<T>(shape, std::move(out));
}

template <typename T>
Tensor<T> unbroadcast(const Tensor<T>& g, const Tensor<T>& like) {
  return g.shape() == like.shape() ? g : sum_leading(g, like.shape());
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& x);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::binary_kernel(a, b, [](T x, T y) { return x + y; }, "add");
  return record(std::move(out), {a, b}, "add",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>& need) {
                  std::vector<Tensor<T>> r(2);
                  if (need[0]) r[0] = detail::unbroadcast(g, in[0]);
                  if (need[1]) r[1] = detail::unbroadcast(g, in[1]);
                  return r;
                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::binary_kernel(a, b, [](T x, T y) { return x - y; }, "sub");
  return record(std::move(out), {a, b}, "sub",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>& need) {
                  std::vector<Tensor<T>> r(2);
                  if (need[0]) r[0] = detail::unbroadcast(g, in[0]);
                  if (need[1]) r[1] = detail::unbroadcast(neg(g), in[1]);
                  return r;
                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::binary_kernel(a, b, [](T x, T y) { return x * y; }, "mul");
  return record(std::move(out), {a, b}, "mul",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>& need) {
                  std::vector<Tensor<T>> r(2);
                  if (need[0]) r[0] = detail::unbroadcast(mul(g, in[1]), in[0]);
                  if (need[1]) r[1] = detail::unbroadcast(mul(g, in[0]), in[1]);
                  return r;
                });
}

// ---------------------------------------------------------------------------
// Scalar-parameter ops

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * factor;
  return record(Tensor<T>(x.shape(), std::move(out)), {x}, "scale",
                [factor](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                         const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{scale(g, factor)};
                });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  std::vector<T> out(x.size());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] + value;
  return record(Tensor<T>(x.shape(), std::move(out)), {x}, "add_scalar",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{g};
                });
}

// ---------------------------------------------------------------------------
// Unary ops

namespace detail {

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F f) {
  std::vector<T> out(x.size());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(src[i]);
  return Tensor<T>(x.shape(), std::move(out));
}

// exp for float written so that loops over it vectorize; about 2 ulp.
inline float exp_vectorizable(float x) {
  x = std::min(std::max(x, -87.0f), 88.0f);
  const float k = std::floor(x * 1.44269504f + 0.5f);
  const float r = x - k * 0.693145752f - k * 1.42860677e-6f;
  float p = 1.0f / 5040;
  p = p * r + 1.0f / 720;
  p = p * r + 1.0f / 120;
  p = p * r + 1.0f / 24;
  p = p * r + 1.0f / 6;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(k) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

// Float uses the vectorizable form; double keeps libm precision for
// finite-difference checks.
template <typename T>
T tanh_kernel(T u) {
  if constexpr (std::is_same_v<T, float>) {
    const float e = exp_vectorizable(-2.0f * std::abs(u));
    return std::copysign((1.0f - e) / (1.0f + e), u);
  } else {
    return std::tanh(u);
  }
}

// tanh-approximated GELU and its first two derivatives.
template <typename T>
struct GeluMath {
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  static T value(T x) {
    T t = tanh_kernel(kC * (x + kA * x * x * x));
    return T(0.5) * x * (T(1) + t);
  }
  static T first(T x) {
    T t = tanh_kernel(kC * (x + kA * x * x * x));
    T du = kC * (T(1) + T(3) * kA * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
  }
  static T second(T x) {
    T t = tanh_kernel(kC * (x + kA * x * x * x));
    T sech2 = T(1) - t * t;
    T du = kC * (T(1) + T(3) * kA * x * x);
    T ddu = T(6) * kA * kC * x;
    return sech2 * du - x * t * sech2 * du * du + T(0.5) * x * sech2 * ddu;
  }
};

template <typename T>
Tensor<T> gelu_second(const Tensor<T>& x) {
  return record_terminal(map(x, [](T v) { return GeluMath<T>::second(v); }),
                         {x}, "gelu_second");
}

template <typename T>
Tensor<T> gelu_first(const Tensor<T>& x) {
  auto out = map(x, [](T v) { return GeluMath<T>::first(v); });
  return record(std::move(out), {x}, "gelu_first",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{mul(g, gelu_second(in[0]))};
                });
}

}  // namespace detail

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return detail::GeluMath<T>::value(v); });
  return record(std::move(out), {x}, "gelu",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{mul(g, detail::gelu_first(in[0]))};
                });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return std::tanh(v); });
  Tensor<T> y = out.detach();
  return record(std::move(out), {x}, "tanh",
                [y](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                    const std::vector<bool>&) {
                  // Recompute through ops so the derivative stays differentiable.
                  Tensor<T> t = grad_enabled() ? tanh(in[0]) : y;
                  return std::vector<Tensor<T>>{
                      mul(g, add_scalar(neg(mul(t, t)), T(1)))};
                });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) {
    return v >= 0 ? T(1) / (T(1) + std::exp(-v))
                  : std::exp(v) / (T(1) + std::exp(v));
  });
  Tensor<T> y = out.detach();
  return record(std::move(out), {x}, "sigmoid",
                [y](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                    const std::vector<bool>&) {
                  Tensor<T> s = grad_enabled() ? sigmoid(in[0]) : y;
                  return std::vector<Tensor<T>>{
                      mul(g, mul(s, add_scalar(neg(s), T(1))))};
                });
}

/// log(1 + exp(x)), evaluated without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) {
    return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
  });
  return record(std::move(out), {x}, "softplus",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{mul(g, sigmoid(in[0]))};
                });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return T(1) / v; });
  return record(std::move(out), {x}, "reciprocal",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  Tensor<T> r = reciprocal(in[0]);
                  return std::vector<Tensor<T>>{neg(mul(g, mul(r, r)))};
                });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) {
      throw DomainError("log of non-positive value " + std::to_string(v) +
                        "; use the softplus-based adversarial losses");
    }
  }
  auto out = detail::map(x, [](T v) { return std::log(v); });
  return record(std::move(out), {x}, "log",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{mul(g, reciprocal(in[0]))};
                });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return std::abs(v); });
  return record(std::move(out), {x}, "abs",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  // sign(x) is piecewise constant; subgradient 0 at the kink.
                  auto sign = detail::map(in[0], [](T v) {
                    return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
                  });
                  return std::vector<Tensor<T>>{mul(g, sign)};
                });
}

/// 1/sqrt(x).
template <typename T>
Tensor<T> rsqrt(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return T(1) / std::sqrt(v); });
  return record(std::move(out), {x}, "rsqrt",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                   const std::vector<bool>&) {
                  Tensor<T> r = rsqrt(in[0]);
                  return std::vector<Tensor<T>>{
                      scale(mul(g, mul(r, mul(r, r))), T(-0.5))};
                });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return mul(x, x);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return reshape(sum_leading(reshape(x, Shape{x.size(), 1}), Shape{1}), Shape{});
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Matrix product

namespace detail {

template <typename T>
std::vector<T> transpose_copy(const T* src, std::size_t rows,
                              std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// Rows×L tile of C held in SIMD registers for the whole k loop, where L is
// one 64-byte vector of T. Stores the first `cols` columns.
template <typename T, std::size_t Rows>
inline void gemm_tile(std::size_t k, const T* __restrict a, const T* __restrict b,
                      std::size_t ldb, T* __restrict c, std::size_t ldc, std::size_t cols) {
  typedef T V __attribute__((vector_size(64)));
  V acc[Rows];
  for (std::size_t r = 0; r < Rows; ++r) acc[r] = V{};
  for (std::size_t p = 0; p < k; ++p) {
    V bv;
    std::memcpy(&bv, b + p * ldb, sizeof(V));
    for (std::size_t r = 0; r < Rows; ++r) acc[r] += a[r * k + p] * bv;
  }
  for (std::size_t r = 0; r < Rows; ++r) std::memcpy(c + r * ldc, &acc[r], cols * sizeof(T));
}

template <typename T, std::size_t Rows = 8>
inline void gemm_rows(std::size_t rows, std::size_t k, const T* a, const T* b,
                      std::size_t ldb, T* c, std::size_t ldc, std::size_t cols) {
  if constexpr (Rows == 0) {
    return;
  } else if (rows == Rows) {
    gemm_tile<T, Rows>(k, a, b, ldb, c, ldc, cols);
  } else {
    gemm_rows<T, Rows - 1>(rows, k, a, b, ldb, c, ldc, cols);
  }
}

/// C[m×n] = A[m×k]·B[k×n], all row-major and contiguous. Each output element
/// is one accumulation over k in ascending order, so the value does not
/// depend on where it falls in the tiling.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const T* __restrict a, const T* __restrict b, T* __restrict c) {
  constexpr std::size_t MR = 8;
  constexpr std::size_t L = 64 / sizeof(T);
  const std::size_t full = n / L * L;
  // Trailing columns are copied into a zero-padded k×L panel.
  std::vector<T> panel;
  if (full < n) {
    panel.assign(k * L, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      std::copy(b + p * n + full, b + p * n + n, panel.begin() + p * L);
    }
  }
  for (std::size_t i = 0; i < m; i += MR) {
    const std::size_t rows = std::min(MR, m - i);
    for (std::size_t j = 0; j < full; j += L) {
      gemm_rows<T>(rows, k, a + i * k, b + j, n, c + i * n + j, n, L);
    }
    if (full < n) gemm_rows<T>(rows, k, a + i * k, panel.data(), L, c + i * n + full, n, n - full);
  }
  mac_count += static_cast<std::uint64_t>(m) * n * k;
}

}  // namespace detail

/// op(a)·op(b) for 2-D tensors, where op transposes when the flag is set.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                 bool transpose_a = false, bool transpose_b = false) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul needs 2-D operands, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) +
                     (transpose_a ? "ᵀ" : "") + " · " + to_string(b.shape()) +
                     (transpose_b ? "ᵀ" : ""));
  }
  std::vector<T> packed_a, packed_b;
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (transpose_a) {
    packed_a = detail::transpose_copy(pa, a.dim(0), a.dim(1));
    pa = packed_a.data();
  }
  if (transpose_b) {
    packed_b = detail::transpose_copy(pb, b.dim(0), b.dim(1));
    pb = packed_b.data();
  }
  std::vector<T> out(m * n);
  detail::gemm_nn(m, n, k, pa, pb, out.data());
  return record(
      Tensor<T>(Shape{m, n}, std::move(out)), {a, b}, "matmul",
      [transpose_a, transpose_b](const Tensor<T>& g,
                                 const std::vector<Tensor<T>>& in,
                                 const std::vector<bool>& need) {
        const auto& A = in[0];
        const auto& B = in[1];
        std::vector<Tensor<T>> r(2);
        if (!transpose_a && !transpose_b) {
          if (need[0]) r[0] = matmul(g, B, false, true);
          if (need[1]) r[1] = matmul(A, g, true, false);
        } else if (!transpose_a && transpose_b) {
          if (need[0]) r[0] = matmul(g, B, false, false);
          if (need[1]) r[1] = matmul(g, A, true, false);
        } else if (transpose_a && !transpose_b) {
          if (need[0]) r[0] = matmul(B, g, false, true);
          if (need[1]) r[1] = matmul(A, g, false, false);
        } else {
          if (need[0]) r[0] = matmul(B, g, true, true);
          if (need[1]) r[1] = matmul(g, A, true, true);
        }
        return r;
      });
}

/// Affine map over the last axis: x[..., in]·weight[in, out] + bias[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  const std::size_t in = weight.dim(0);
  const std::size_t out = weight.dim(1);
  if (x.shape().back() != in) {
    throw ShapeError("linear: input " + to_string(x.shape()) +
                     " does not end in " + std::to_string(in));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out;
  auto flat = reshape(x, Shape{x.size() / in, in});
  auto y = matmul(flat, weight);
  if (bias.defined()) y = add(y, bias);
  return reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Data movement

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) {
    throw ShapeError("permute: order has " + std::to_string(perm.size()) +
                     " axes for tensor " + to_string(x.shape()));
  }
  std::vector<std::size_t> inverse(r, r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || inverse[perm[i]] != r) {
      throw ShapeError("permute: invalid axis order");
    }
    inverse[perm[i]] = i;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  auto in_strides = detail::strides_of(x.shape());
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) step[i] = in_strides[perm[i]];

  const std::size_t n = x.size();
  std::vector<T> out(n);
  auto src = x.data();
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  // The innermost output axis is walked in a tight loop.
  const std::size_t inner = r ? out_shape[r - 1] : 1;
  const std::size_t inner_step = r ? step[r - 1] : 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] = src[offset + j * inner_step];
    for (std::size_t a = r - 1; a-- > 0;) {
      ++idx[a];
      offset += step[a];
      if (idx[a] < out_shape[a]) break;
      offset -= step[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  return record(Tensor<T>(out_shape, std::move(out)), {x}, "permute",
                [inverse](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                          const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{permute(g, inverse)};
                });
}

template <typename T>
Tensor<T> pad_narrow(const Tensor<T>& x, std::size_t axis, std::size_t start,
                     std::size_t full);

/// Slice [start, start+length) along `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start,
                 std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis) || length == 0) {
    throw ShapeError("narrow out of range on " + to_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  const std::size_t outer = numel(Shape(x.shape().begin(), x.shape().begin() + axis));
  const std::size_t inner = numel(Shape(x.shape().begin() + axis + 1, x.shape().end()));
  const std::size_t full = x.dim(axis);
  std::vector<T> out(numel(shape));
  auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + (o * full + start) * inner, length * inner,
                out.begin() + o * length * inner);
  }
  return record(Tensor<T>(shape, std::move(out)), {x}, "narrow",
                [axis, start, full](const Tensor<T>& g,
                                    const std::vector<Tensor<T>>&,
                                    const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{pad_narrow(g, axis, start, full)};
                });
}

/// Adjoint of narrow: places `x` at `start` along `axis` in a zero tensor.
template <typename T>
Tensor<T> pad_narrow(const Tensor<T>& x, std::size_t axis, std::size_t start,
                     std::size_t full) {
  Shape shape = x.shape();
  const std::size_t length = shape[axis];
  shape[axis] = full;
  const std::size_t outer = numel(Shape(shape.begin(), shape.begin() + axis));
  const std::size_t inner = numel(Shape(shape.begin() + axis + 1, shape.end()));
  std::vector<T> out(numel(shape), T(0));
  auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * length * inner, length * inner,
                out.begin() + (o * full + start) * inner);
  }
  return record(Tensor<T>(shape, std::move(out)), {x}, "pad_narrow",
                [axis, start, length](const Tensor<T>& g,
                                      const std::vector<Tensor<T>>&,
                                      const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{narrow(g, axis, start, length)};
                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat rank mismatch");
    s[axis] = shape[axis];
    if (s != shape) {
      throw ShapeError("concat: " + to_string(p.shape()) + " incompatible with " +
                       to_string(parts[0].shape()));
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const std::size_t outer = numel(Shape(shape.begin(), shape.begin() + axis));
  const std::size_t inner = numel(Shape(shape.begin() + axis + 1, shape.end()));
  std::vector<T> out(numel(shape));
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * len * inner, len * inner,
                  out.begin() + (o * total + start) * inner);
    }
    start += len;
  }
  return record(Tensor<T>(shape, std::move(out)), parts, "concat",
                [axis](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
                       const std::vector<bool>& need) {
                  std::vector<Tensor<T>> r(in.size());
                  std::size_t offset = 0;
                  for (std::size_t i = 0; i < in.size(); ++i) {
                    const std::size_t len = in[i].dim(axis);
                    if (need[i]) r[i] = narrow(g, axis, offset, len);
                    offset += len;
                  }
                  return r;
                });
}

/// Circular shift along `axis`, with a separate shift for each index of
/// axis 0 (the batch). `shifts` has one entry per batch element, or a single
/// entry applied to all. Element i moves to position i + shift.
template <typename T>
Tensor<T> roll(const Tensor<T>& x, std::size_t axis,
               const std::vector<long>& shifts) {
  if (axis >= x.rank()) throw ShapeError("roll axis out of range");
  const std::size_t batch = x.dim(0);
  if (shifts.size() != 1 && shifts.size() != batch) {
    throw ShapeError("roll: need 1 or " + std::to_string(batch) + " shifts");
  }
  const std::size_t len = x.dim(axis);
  const std::size_t inner = numel(Shape(x.shape().begin() + axis + 1, x.shape().end()));
  const std::size_t outer = x.size() / (len * inner);
  const std::size_t per_batch = outer / batch;
  std::vector<T> out(x.size());
  auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const long raw = shifts.size() == 1 ? shifts[0] : shifts[o / std::max<std::size_t>(per_batch, 1)];
    const long l = static_cast<long>(len);
    const std::size_t s = static_cast<std::size_t>(((raw % l) + l) % l);
    const T* row = src.data() + o * len * inner;
    T* dst = out.data() + o * len * inner;
    for (std::size_t i = 0; i < len; ++i) {
      std::copy_n(row + i * inner, inner, dst + ((i + s) % len) * inner);
    }
  }
  std::vector<long> back(shifts.size());
  for (std::size_t i = 0; i < shifts.size(); ++i) back[i] = -shifts[i];
  return record(Tensor<T>(x.shape(), std::move(out)), {x}, "roll",
                [axis, back](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                             const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{roll(g, axis, back)};
                });
}

template <typename T>
Tensor<T> roll(const Tensor<T>& x, std::size_t axis, long shift) {
  return roll(x, axis, std::vector<long>{shift});
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& rows, const std::vector<std::size_t>& index,
                       std::size_t table_rows);

/// Gathers rows of a [K×C] table: out[i] = table[index[i]].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& index) {
  if (table.rank() != 2) throw ShapeError("gather_rows needs a 2-D table");
  const std::size_t k = table.dim(0);
  const std::size_t c = table.dim(1);
  std::vector<T> out(index.size() * c);
  auto src = table.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= k) {
      throw std::out_of_range("row index " + std::to_string(index[i]) +
                              " outside table of " + std::to_string(k) + " rows");
    }
    std::copy_n(src.begin() + index[i] * c, c, out.begin() + i * c);
  }
  return record(Tensor<T>(Shape{index.size(), c}, std::move(out)), {table},
                "gather_rows",
                [index, k](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                           const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{scatter_rows(g, index, k)};
                });
}

/// Adjoint of gather_rows: sums each row of `rows` into table row index[i].
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& rows, const std::vector<std::size_t>& index,
                       std::size_t table_rows) {
  const std::size_t c = rows.dim(1);
  std::vector<T> out(table_rows * c, T(0));
  auto src = rows.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    for (std::size_t j = 0; j < c; ++j) out[index[i] * c + j] += src[i * c + j];
  }
  return record(Tensor<T>(Shape{table_rows, c}, std::move(out)), {rows},
                "scatter_rows",
                [index](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                        const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{gather_rows(g, index)};
                });
}

// ---------------------------------------------------------------------------
// Depthwise convolution on channels-last maps

enum class HorizontalPad { circular, zero };
enum class VerticalPad { zero, replicate };

struct PaddingMode {
  HorizontalPad horizontal = HorizontalPad::circular;
  VerticalPad vertical = VerticalPad::replicate;
};

namespace detail {

// Source index for each (tap, output position), or -1 for a zero tap.
inline std::vector<long> tap_map(std::size_t extent, std::size_t taps,
                                 bool wrap, bool replicate) {
  const long r = static_cast<long>(taps / 2);
  const long n = static_cast<long>(extent);
  std::vector<long> map(taps * extent);
  for (std::size_t t = 0; t < taps; ++t) {
    for (long p = 0; p < n; ++p) {
      long s = p + static_cast<long>(t) - r;
      if (s < 0 || s >= n) {
        if (wrap) {
          s = ((s % n) + n) % n;
        } else if (replicate) {
          s = std::clamp(s, 0L, n - 1);
        } else {
          s = -1;
        }
      }
      map[t * extent + static_cast<std::size_t>(p)] = s;
    }
  }
  return map;
}

struct DwGeometry {
  std::size_t n, h, w, c, kh, kw;
  std::vector<long> rows, cols;
};

inline DwGeometry dw_geometry(const Shape& x, const Shape& k, PaddingMode pad) {
  if (x.size() != 4) throw ShapeError("depthwise conv input must be [N,H,W,C]");
  if (k.size() != 3 || k[2] != x[3]) {
    throw ShapeError("depthwise kernels " + to_string(k) +
                     " do not match input " + to_string(x));
  }
  if (k[0] % 2 == 0 || k[1] % 2 == 0) {
    throw ConfigError("depthwise kernel size must be odd, got " +
                      std::to_string(k[0]) + "x" + std::to_string(k[1]));
  }
  DwGeometry g{x[0], x[1], x[2], x[3], k[0], k[1], {}, {}};
  g.rows = tap_map(g.h, g.kh, false, pad.vertical == VerticalPad::replicate);
  g.cols = tap_map(g.w, g.kw, pad.horizontal == HorizontalPad::circular, false);
  return g;
}

template <typename T>
std::vector<T> dw_forward(const DwGeometry& g, const T* x, const T* k) {
  std::vector<T> out(g.n * g.h * g.w * g.c, T(0));
  std::uint64_t macs = 0;
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t y = 0; y < g.h; ++y) {
      for (std::size_t xo = 0; xo < g.w; ++xo) {
        T* __restrict o = out.data() + ((b * g.h + y) * g.w + xo) * g.c;
        for (std::size_t ty = 0; ty < g.kh; ++ty) {
          const long sy = g.rows[ty * g.h + y];
          if (sy < 0) continue;
          for (std::size_t tx = 0; tx < g.kw; ++tx) {
            const long sx = g.cols[tx * g.w + xo];
            if (sx < 0) continue;
            const T* __restrict src = x + ((b * g.h + sy) * g.w + sx) * g.c;
            const T* __restrict kk = k + (ty * g.kw + tx) * g.c;
            for (std::size_t ch = 0; ch < g.c; ++ch) o[ch] += kk[ch] * src[ch];
            macs += g.c;
          }
        }
      }
    }
  }
  mac_count += macs;
  return out;
}

template <typename T>
Tensor<T> dw_input_grad(const Tensor<T>& grad, const Tensor<T>& kernels,
                        const DwGeometry& g) {
  std::vector<T> out(g.n * g.h * g.w * g.c, T(0));
  const T* gp = grad.data().data();
  const T* k = kernels.data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t y = 0; y < g.h; ++y) {
      for (std::size_t xo = 0; xo < g.w; ++xo) {
        const T* __restrict go = gp + ((b * g.h + y) * g.w + xo) * g.c;
        for (std::size_t ty = 0; ty < g.kh; ++ty) {
          const long sy = g.rows[ty * g.h + y];
          if (sy < 0) continue;
          for (std::size_t tx = 0; tx < g.kw; ++tx) {
            const long sx = g.cols[tx * g.w + xo];
            if (sx < 0) continue;
            T* __restrict dst = out.data() + ((b * g.h + sy) * g.w + sx) * g.c;
            const T* __restrict kk = k + (ty * g.kw + tx) * g.c;
            for (std::size_t ch = 0; ch < g.c; ++ch) dst[ch] += kk[ch] * go[ch];
          }
        }
      }
    }
  }
  return record_terminal(Tensor<T>(Shape{g.n, g.h, g.w, g.c}, std::move(out)),
                         {grad, kernels}, "depthwise_conv2d_input_grad");
}

template <typename T>
Tensor<T> dw_kernel_grad(const Tensor<T>& grad, const Tensor<T>& input,
                         const DwGeometry& g) {
  std::vector<T> out(g.kh * g.kw * g.c, T(0));
  const T* gp = grad.data().data();
  const T* x = input.data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t y = 0; y < g.h; ++y) {
      for (std::size_t xo = 0; xo < g.w; ++xo) {
        const T* __restrict go = gp + ((b * g.h + y) * g.w + xo) * g.c;
        for (std::size_t ty = 0; ty < g.kh; ++ty) {
          const long sy = g.rows[ty * g.h + y];
          if (sy < 0) continue;
          for (std::size_t tx = 0; tx < g.kw; ++tx) {
            const long sx = g.cols[tx * g.w + xo];
            if (sx < 0) continue;
            const T* __restrict src = x + ((b * g.h + sy) * g.w + sx) * g.c;
            T* __restrict kk = out.data() + (ty * g.kw + tx) * g.c;
            for (std::size_t ch = 0; ch < g.c; ++ch) kk[ch] += go[ch] * src[ch];
          }
        }
      }
    }
  }
  return record_terminal(Tensor<T>(Shape{g.kh, g.kw, g.c}, std::move(out)),
                         {grad, input}, "depthwise_conv2d_kernel_grad");
}

}  // namespace detail

/// Per-channel spatial convolution of a channels-last map x[N,H,W,C] with
/// kernels[kh,kw,C] (odd sizes) and bias[C]. Output keeps the spatial size.
/// Gradients of this op are not themselves differentiable.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernels,
                           const Tensor<T>& bias, PaddingMode pad = {}) {
  auto geom = detail::dw_geometry(x.shape(), kernels.shape(), pad);
  if (bias.defined() && bias.shape() != Shape{geom.c}) {
    throw ShapeError("depthwise bias must be [" + std::to_string(geom.c) + "]");
  }
  auto out = detail::dw_forward(geom, x.data().data(), kernels.data().data());
  Tensor<T> y = record(
      Tensor<T>(x.shape(), std::move(out)), {x, kernels}, "depthwise_conv2d",
      [geom](const Tensor<T>& g, const std::vector<Tensor<T>>& in,
             const std::vector<bool>& need) {
        std::vector<Tensor<T>> r(2);
        if (need[0]) r[0] = detail::dw_input_grad(g, in[1], geom);
        if (need[1]) r[1] = detail::dw_kernel_grad(g, in[0], geom);
        return r;
      });
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Transposed convolution (channels-last), built as a matmul followed by a
// column-to-image scatter so that it stays differentiable to any order.

struct TransposedConvGeometry {
  std::size_t n, h, w, kh, kw, co, stride, pad;
  std::size_t out_h() const { return (h - 1) * stride + kh - 2 * pad; }
  std::size_t out_w() const { return (w - 1) * stride + kw - 2 * pad; }
};

namespace detail {

template <typename T>
Tensor<T> im2col_adjoint(const Tensor<T>& image, const TransposedConvGeometry& g);

// cols[N,H,W,kh,kw,co] → image[N,oh,ow,co]; horizontal taps wrap, vertical
// taps falling outside are dropped.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const TransposedConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  std::vector<T> out(g.n * oh * ow * g.co, T(0));
  const T* src = cols.data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t iy = 0; iy < g.h; ++iy) {
      for (std::size_t ix = 0; ix < g.w; ++ix) {
        const T* cell = src + ((b * g.h + iy) * g.w + ix) * g.kh * g.kw * g.co;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long oy = static_cast<long>(iy * g.stride + ky) - static_cast<long>(g.pad);
          if (oy < 0 || oy >= static_cast<long>(oh)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            long ox = static_cast<long>(ix * g.stride + kx) - static_cast<long>(g.pad);
            ox = ((ox % static_cast<long>(ow)) + static_cast<long>(ow)) % static_cast<long>(ow);
            T* dst = out.data() + ((b * oh + oy) * ow + ox) * g.co;
            const T* v = cell + (ky * g.kw + kx) * g.co;
            for (std::size_t c = 0; c < g.co; ++c) dst[c] += v[c];
          }
        }
      }
    }
  }
  return record(Tensor<T>(Shape{g.n, oh, ow, g.co}, std::move(out)), {cols},
                "col2im",
                [g](const Tensor<T>& grad, const std::vector<Tensor<T>>&,
                    const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{im2col_adjoint(grad, g)};
                });
}

template <typename T>
Tensor<T> im2col_adjoint(const Tensor<T>& image, const TransposedConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t cell_len = g.kh * g.kw * g.co;
  std::vector<T> out(g.n * g.h * g.w * cell_len, T(0));
  const T* src = image.data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t iy = 0; iy < g.h; ++iy) {
      for (std::size_t ix = 0; ix < g.w; ++ix) {
        T* cell = out.data() + ((b * g.h + iy) * g.w + ix) * cell_len;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long oy = static_cast<long>(iy * g.stride + ky) - static_cast<long>(g.pad);
          if (oy < 0 || oy >= static_cast<long>(oh)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            long ox = static_cast<long>(ix * g.stride + kx) - static_cast<long>(g.pad);
            ox = ((ox % static_cast<long>(ow)) + static_cast<long>(ow)) % static_cast<long>(ow);
            const T* v = src + ((b * oh + oy) * ow + ox) * g.co;
            std::copy_n(v, g.co, cell + (ky * g.kw + kx) * g.co);
          }
        }
      }
    }
  }
  return record(Tensor<T>(Shape{g.n, g.h, g.w, g.kh, g.kw, g.co}, std::move(out)),
                {image}, "im2col_adjoint",
                [g](const Tensor<T>& grad, const std::vector<Tensor<T>>&,
                    const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{col2im(grad, g)};
                });
}

}  // namespace detail

/// Transposed convolution of x[N,H,W,Ci] with weight[Ci,kh,kw,Co] and
/// bias[Co]. Horizontal output taps wrap around (equirectangular seam).
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t stride,
                           std::size_t pad) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(3)) {
    throw ShapeError("conv_transpose2d: input " + to_string(x.shape()) +
                     " incompatible with weight " + to_string(weight.shape()));
  }
  TransposedConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(1),
                           weight.dim(2), weight.dim(3), stride, pad};
  const std::size_t ci = x.dim(3);
  auto cols = matmul(reshape(x, Shape{g.n * g.h * g.w, ci}),
                     reshape(weight, Shape{ci, g.kh * g.kw * g.co}));
  auto image = detail::col2im(
      reshape(cols, Shape{g.n, g.h, g.w, g.kh, g.kw, g.co}), g);
  return bias.defined() ? add(image, bias) : image;
}

// ---------------------------------------------------------------------------
// Bilinear ×2 upsampling of NCHW maps (half-pixel centres). Columns wrap
// around, rows clamp at the poles.

template <typename T>
Tensor<T> upsample2x_adjoint(const Tensor<T>& x);

namespace detail {

// out[2i] = 0.75·in[i] + 0.25·in[i-1], out[2i+1] = 0.75·in[i] + 0.25·in[i+1]
inline std::size_t up_neighbor(std::size_t i, std::size_t parity, std::size_t n,
                               bool wrap) {
  if (parity == 0) {
    if (i > 0) return i - 1;
    return wrap ? n - 1 : 0;
  }
  if (i + 1 < n) return i + 1;
  return wrap ? 0 : n - 1;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample2x expects [N,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  std::vector<T> out(planes * oh * ow);
  std::vector<T> tmp(h * ow);
  auto src = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = src.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const std::size_t i = xo / 2;
        const std::size_t j = detail::up_neighbor(i, xo % 2, w, true);
        tmp[y * ow + xo] = T(0.75) * in[y * w + i] + T(0.25) * in[y * w + j];
      }
    }
    T* dst = out.data() + p * oh * ow;
    for (std::size_t yo = 0; yo < oh; ++yo) {
      const std::size_t i = yo / 2;
      const std::size_t j = detail::up_neighbor(i, yo % 2, h, false);
      for (std::size_t xo = 0; xo < ow; ++xo) {
        dst[yo * ow + xo] = T(0.75) * tmp[i * ow + xo] + T(0.25) * tmp[j * ow + xo];
      }
    }
  }
  return record(Tensor<T>(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out)), {x},
                "upsample2x",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{upsample2x_adjoint(g)};
                });
}

template <typename T>
Tensor<T> upsample2x_adjoint(const Tensor<T>& x) {
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t oh = x.dim(2), ow = x.dim(3);
  const std::size_t h = oh / 2, w = ow / 2;
  std::vector<T> out(planes * h * w, T(0));
  std::vector<T> tmp(h * ow);
  auto src = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = src.data() + p * oh * ow;
    std::fill(tmp.begin(), tmp.end(), T(0));
    for (std::size_t yo = 0; yo < oh; ++yo) {
      const std::size_t i = yo / 2;
      const std::size_t j = detail::up_neighbor(i, yo % 2, h, false);
      for (std::size_t xo = 0; xo < ow; ++xo) {
        tmp[i * ow + xo] += T(0.75) * g[yo * ow + xo];
        tmp[j * ow + xo] += T(0.25) * g[yo * ow + xo];
      }
    }
    T* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const std::size_t i = xo / 2;
        const std::size_t j = detail::up_neighbor(i, xo % 2, w, true);
        dst[y * w + i] += T(0.75) * tmp[y * ow + xo];
        dst[y * w + j] += T(0.25) * tmp[y * ow + xo];
      }
    }
  }
  return record(Tensor<T>(Shape{x.dim(0), x.dim(1), h, w}, std::move(out)), {x},
                "upsample2x_adjoint",
                [](const Tensor<T>& g, const std::vector<Tensor<T>>&,
                   const std::vector<bool>&) {
                  return std::vector<Tensor<T>>{upsample2x(g)};
                });
}

// ---------------------------------------------------------------------------
// Elementwise dispatcher over the op set used by the networks and losses.

enum class Elementwise { add, sub, mul, gelu, tanh, log, sigmoid, scale, abs };

template <typename T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& x,
                      const Tensor<T>& other = {}, T factor = T(1)) {
  switch (op) {
    case Elementwise::add: return add(x, other);
    case Elementwise::sub: return sub(x, other);
    case Elementwise::mul: return mul(x, other);
    case Elementwise::gelu: return gelu(x);
    case Elementwise::tanh: return tanh(x);
    case Elementwise::log: return log(x);
    case Elementwise::sigmoid: return sigmoid(x);
    case Elementwise::scale: return scale(x, factor);
    case Elementwise::abs: return abs(x);
  }
  throw ContractError("unknown elementwise op");
}

}  // namespace omnimix
