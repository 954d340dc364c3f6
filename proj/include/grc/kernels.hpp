#pragma once

// Row-batched compute kernels shared by the reference forward pass, the
// training pass and the paged serving engine. Every output element is
// produced by the same sequence of floating-point operations regardless of
// how many rows are processed together, so batched and single-row paths
// agree bitwise (the build disables FMA contraction for the same reason).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#if defined(__AVX__)
#include <immintrin.h>
#endif

namespace grc {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kNormEps = 1e-6;

namespace detail {

template <class T>
inline constexpr std::size_t kLanes = sizeof(T) == 4 ? 8 : 4;

template <class T>
inline T reduce_lanes(const T* acc) {
  if constexpr (kLanes<T> == 8)
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  else
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

template <class T>
using lanes_t [[gnu::vector_size(sizeof(T) * kLanes<T>)]] = T;

template <class T>
inline lanes_t<T> load_lanes(const T* p) {
  lanes_t<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

// a * b + c, fused when the target has FMA. Explicit fusion is deterministic;
// only implicit contraction is disabled.
template <class T>
inline lanes_t<T> madd(lanes_t<T> a, lanes_t<T> b, lanes_t<T> c) {
#if defined(__FMA__)
  if constexpr (sizeof(T) == 4)
    return lanes_t<T>(_mm256_fmadd_ps(__m256(a), __m256(b), __m256(c)));
  else
    return lanes_t<T>(_mm256_fmadd_pd(__m256d(a), __m256d(b), __m256d(c)));
#else
  return a * b + c;
#endif
}

template <class T>
inline T madd_scalar(T a, T b, T c) {
#if defined(__FMA__)
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

// Lane-strided accumulation of R rows of x against O weight rows over the
// first k = n - n % L columns. Accumulator indices are compile-time constants
// so GCC keeps them in registers.
template <class T, std::size_t R, std::size_t O>
inline std::size_t accumulate_block(const T* const* xs, const T* const* ws, std::size_t n,
                                    lanes_t<T> (&sum)[R * O]) {
  constexpr std::size_t L = kLanes<T>;
  std::size_t k = 0;
  [&]<std::size_t... I>(std::index_sequence<I...>) {
    lanes_t<T> acc[R * O] = {};
    for (; k + L <= n; k += L) {
      lanes_t<T> wv[O], xv[R];
      for (std::size_t o = 0; o < O; ++o) wv[o] = load_lanes(ws[o] + k);
      for (std::size_t r = 0; r < R; ++r) xv[r] = load_lanes(xs[r] + k);
      ((acc[I] = madd<T>(xv[I / O], wv[I % O], acc[I])), ...);
    }
    ((sum[I] = acc[I]), ...);
  }(std::make_index_sequence<R * O>{});
  return k;
}

// Each output element accumulates lane-strided over k and is reduced in a
// fixed tree, so its value does not depend on R or O.
template <class T, std::size_t R, std::size_t O>
inline void dot_block(const T* const* xs, const T* const* ws, std::size_t n, T* out, std::size_t out_stride) {
  constexpr std::size_t L = kLanes<T>;
  lanes_t<T> sum[R * O];
  const std::size_t k = accumulate_block<T, R, O>(xs, ws, n, sum);
#if defined(__AVX__)
  if constexpr (O == 4) {
    if (k == n) {
      // same pairwise tree as reduce_lanes, four outputs at a time
      for (std::size_t r = 0; r < R; ++r) {
        if constexpr (sizeof(T) == 4) {
          const __m256 h01 = _mm256_hadd_ps(__m256(sum[r * 4]), __m256(sum[r * 4 + 1]));
          const __m256 h23 = _mm256_hadd_ps(__m256(sum[r * 4 + 2]), __m256(sum[r * 4 + 3]));
          const __m256 h = _mm256_hadd_ps(h01, h23);
          _mm_storeu_ps(out + r * out_stride, _mm_add_ps(_mm256_castps256_ps128(h), _mm256_extractf128_ps(h, 1)));
        } else {
          const __m256d h01 = _mm256_hadd_pd(__m256d(sum[r * 4]), __m256d(sum[r * 4 + 1]));
          const __m256d h23 = _mm256_hadd_pd(__m256d(sum[r * 4 + 2]), __m256d(sum[r * 4 + 3]));
          _mm_storeu_pd(out + r * out_stride, _mm_add_pd(_mm256_castpd256_pd128(h01), _mm256_extractf128_pd(h01, 1)));
          _mm_storeu_pd(out + r * out_stride + 2,
                        _mm_add_pd(_mm256_castpd256_pd128(h23), _mm256_extractf128_pd(h23, 1)));
        }
      }
      return;
    }
  }
#endif
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t o = 0; o < O; ++o) {
      T a[L];
      for (std::size_t l = 0; l < L; ++l) a[l] = sum[r * O + o][l];
      for (std::size_t j = k; j < n; ++j) a[j - k] = madd_scalar<T>(xs[r][j], ws[o][j], a[j - k]);
      out[r * out_stride + o] = reduce_lanes<T>(a);
    }
}

template <class T, std::size_t R>
inline void linear_tile(const T* const* xs, const Mat<T>& w, T* y, std::size_t y_stride) {
  const std::size_t in = w.cols(), out = w.rows();
  std::size_t o = 0;
  for (; o + 4 <= out; o += 4) {
    const T* ws[4] = {w.row(o).data(), w.row(o + 1).data(), w.row(o + 2).data(), w.row(o + 3).data()};
    dot_block<T, R, 4>(xs, ws, in, y + o, y_stride);
  }
  for (; o < out; ++o) {
    const T* ws[1] = {w.row(o).data()};
    dot_block<T, R, 1>(xs, ws, in, y + o, y_stride);
  }
}

}  // namespace detail

/// Lane-ordered dot product; the single-row case of the linear kernel.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  const T* xs[1] = {a};
  const T* ws[1] = {b};
  T out;
  detail::dot_block<T, 1, 1>(xs, ws, n, &out, 1);
  return out;
}

/// y = x * W^T for row-major x (n x in) and W (out x in). Rows are processed
/// in tiles of four and outputs in tiles of four to reuse loaded weights.
template <class T>
inline void linear_rows(const Mat<T>& x, const Mat<T>& w, Mat<T>& y) {
  const std::size_t n = x.rows(), out = w.rows();
  y.resize(n, out);
  std::size_t r = 0;
  for (; r + 4 <= n; r += 4) {
    const T* xs[4] = {x.row(r).data(), x.row(r + 1).data(), x.row(r + 2).data(), x.row(r + 3).data()};
    detail::linear_tile<T, 4>(xs, w, y.row(r).data(), out);
  }
  for (; r < n; ++r) {
    const T* xs[1] = {x.row(r).data()};
    detail::linear_tile<T, 1>(xs, w, y.row(r).data(), out);
  }
}

/// Row-wise RMS normalization with gain. Writes inverse RMS per row if asked.
template <class T>
inline void rmsnorm_rows(const Mat<T>& x, const Vec<T>& gain, Mat<T>& y, Vec<T>* inv_rms = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  y.resize(n, d);
  if (inv_rms) inv_rms->resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.row(r).data();
    const T ms = dot(xr, xr, d) / T(d);
    const T inv = T(1) / std::sqrt(ms + T(kNormEps));
    for (std::size_t c = 0; c < d; ++c) y(r, c) = xr[c] * inv * gain[c];
    if (inv_rms) (*inv_rms)[r] = inv;
  }
}

/// Rotary embedding on one head vector (half-split pairing), in place.
/// inverse=true applies the transpose rotation (used by backprop).
template <class T>
inline void rope_head(T* v, std::size_t head_dim, std::int64_t pos, double base, bool inverse = false) {
  const std::size_t half = head_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * double(i) / double(head_dim));
    const double ang = double(pos) * freq;
    const T c = T(std::cos(ang)), s = inverse ? T(-std::sin(ang)) : T(std::sin(ang));
    const T a = v[i], b = v[i + half];
    v[i] = a * c - b * s;
    v[i + half] = a * s + b * c;
  }
}

/// Per-row rotation angles for a list of positions; shared by every layer
/// and by both the query and key projections.
template <class T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;  // rows x half

  RopeTable(std::span<const std::int64_t> pos, std::size_t head_dim, double base) : half(head_dim / 2) {
    std::vector<double> freq(half);
    for (std::size_t i = 0; i < half; ++i) freq[i] = std::pow(base, -2.0 * double(i) / double(head_dim));
    cos.resize(pos.size() * half);
    sin.resize(pos.size() * half);
    for (std::size_t r = 0; r < pos.size(); ++r)
      for (std::size_t i = 0; i < half; ++i) {
        const double ang = double(pos[r]) * freq[i];
        cos[r * half + i] = T(std::cos(ang));
        sin[r * half + i] = T(std::sin(ang));
      }
  }
};

template <class T>
inline void rope_rows(Mat<T>& x, std::size_t num_heads, std::size_t head_dim, const RopeTable<T>& t,
                      bool inverse = false) {
  const std::size_t half = head_dim / 2;
  for (std::size_t r = 0; r < std::size_t(x.rows()); ++r) {
    const T* cs = t.cos.data() + r * half;
    const T* sn = t.sin.data() + r * half;
    for (std::size_t h = 0; h < num_heads; ++h) {
      T* v = x.row(r).data() + h * head_dim;
      for (std::size_t i = 0; i < half; ++i) {
        const T a = v[i], b = v[i + half];
        const T s = inverse ? -sn[i] : sn[i];
        v[i] = a * cs[i] - b * s;
        v[i + half] = a * s + b * cs[i];
      }
    }
  }
}

template <class T>
inline void rope_rows(Mat<T>& x, std::size_t num_heads, std::size_t head_dim, std::span<const std::int64_t> pos,
                      double base, bool inverse = false) {
  rope_rows(x, num_heads, head_dim, RopeTable<T>(pos, head_dim, base), inverse);
}

namespace detail {

// Single-precision exp: range reduction by ln 2 and a degree-5 polynomial
// (about 2 ulp). The lane and scalar forms perform the same operations, so a
// value does not depend on where it sits in a batch.
inline constexpr float kExpLo = -87.0f, kExpHi = 88.0f;
inline constexpr float kLog2e = 1.44269504088896341f, kLn2Hi = 0.693359375f, kLn2Lo = -2.12194440e-4f;
inline constexpr float kExpP[6] = {1.9875691500e-4f, 1.3981999507e-3f, 8.3334519073e-3f,
                                   4.1665795894e-2f, 1.6666665459e-1f, 5.0000001201e-1f};

inline float exp_scalar(float x) {
  x = std::min(std::max(x, kExpLo), kExpHi);
  const float n = std::nearbyint(x * kLog2e);
  float r = madd_scalar(n, -kLn2Hi, x);
  r = madd_scalar(n, -kLn2Lo, r);
  float p = kExpP[0];
  for (int i = 1; i < 6; ++i) p = madd_scalar(p, r, kExpP[i]);
  const float y = madd_scalar(p, r * r, r) + 1.0f;
  const std::int32_t bits = (std::int32_t(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return y * scale;
}

#if defined(__AVX__)
inline lanes_t<float> exp_lanes(lanes_t<float> x) {
  using V = lanes_t<float>;
  using I [[gnu::vector_size(32)]] = std::int32_t;
  x = __builtin_ia32_minps256(__builtin_ia32_maxps256(x, V{} + kExpLo), V{} + kExpHi);
  const V n = V(_mm256_round_ps(__m256(x * kLog2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC));
  V r = madd<float>(n, V{} - kLn2Hi, x);
  r = madd<float>(n, V{} - kLn2Lo, r);
  V p = V{} + kExpP[0];
  for (int i = 1; i < 6; ++i) p = madd<float>(p, r, V{} + kExpP[i]);
  const V y = madd<float>(p, r * r, r) + 1.0f;
  const I bits = (__builtin_convertvector(n, I) + 127) << 23;
  return y * V(bits);
}
#endif

}  // namespace detail

/// x[i] = exp(x[i]) in place.
template <class T>
inline void exp_inplace(T* x, std::size_t n) {
  std::size_t i = 0;
  if constexpr (std::is_same_v<T, float>) {
#if defined(__AVX__)
    for (; i + 8 <= n; i += 8) {
      const auto v = detail::exp_lanes(detail::load_lanes(x + i));
      std::memcpy(x + i, &v, sizeof v);
    }
#endif
    for (; i < n; ++i) x[i] = detail::exp_scalar(x[i]);
  } else {
    for (; i < n; ++i) x[i] = std::exp(x[i]);
  }
}

/// out[i] = z / (1 + exp(-z)) for z = in[i].
template <class T>
inline void silu_rows(const T* in, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = -in[i];
  exp_inplace(out, n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] / (T(1) + out[i]);
}

template <class T>
inline T silu(T z) {
  T out;
  silu_rows(&z, &out, 1);
  return out;
}

namespace detail {

// outs[g][c] = sum_j p[g * count + j] * v_j[c] over allowed j in ascending
// order, with the rows held in registers.
template <std::size_t G, std::size_t NV, class T, class ValFn, class AllowFn>
void weighted_sum_fixed(const T* p, std::size_t count, ValFn&& values, AllowFn&& allowed, T* const* outs) {
  constexpr std::size_t L = kLanes<T>;
  [&]<std::size_t... I>(std::index_sequence<I...>) {
    lanes_t<T> acc[G * NV] = {};
    for (std::size_t j = 0; j < count; ++j) {
      if (!allowed(j)) continue;
      const T* v = values(j);
      ((acc[I] = acc[I] + p[(I / NV) * count + j] * load_lanes(v + (I % NV) * L)), ...);
    }
    ((std::memcpy(outs[I / NV] + (I % NV) * L, &acc[I], sizeof acc[I])), ...);
  }(std::make_index_sequence<G * NV>{});
}

template <std::size_t G, class T, class ValFn, class AllowFn>
bool weighted_sum_group(const T* p, std::size_t count, std::size_t head_dim, ValFn&& values, AllowFn&& allowed,
                        T* const* outs) {
  constexpr std::size_t L = kLanes<T>;
  if (head_dim % L != 0) return false;
  switch (head_dim / L) {
    case 1: weighted_sum_fixed<G, 1>(p, count, values, allowed, outs); return true;
    case 2: weighted_sum_fixed<G, 2>(p, count, values, allowed, outs); return true;
    case 4: weighted_sum_fixed<G, 4>(p, count, values, allowed, outs); return true;
    default: return false;
  }
}

template <class T, class ValFn, class AllowFn>
void weighted_sum(const T* p, std::size_t groups, std::size_t count, std::size_t head_dim, ValFn&& values,
                  AllowFn&& allowed, T* const* outs) {
  if (groups == 2 && weighted_sum_group<2>(p, count, head_dim, values, allowed, outs)) return;
  if (groups == 4 && weighted_sum_group<4>(p, count, head_dim, values, allowed, outs)) return;
  for (std::size_t g = 0; g < groups; ++g) {
    const T* pg = p + g * count;
    if (weighted_sum_group<1>(pg, count, head_dim, values, allowed, outs + g)) continue;
    T* out = outs[g];
    std::fill(out, out + head_dim, T(0));
    for (std::size_t j = 0; j < count; ++j) {
      if (!allowed(j)) continue;
      const T* v = values(j);
      for (std::size_t c = 0; c < head_dim; ++c) out[c] += pg[j] * v[c];
    }
  }
}

// Scores of R query heads against four keys; each equals dot(q, key).
template <class T>
void score_four(const T* const* qs, std::size_t heads, const T* const* ks, std::size_t n, T* d) {
  switch (heads) {
    case 1: return dot_block<T, 1, 4>(qs, ks, n, d, 4);
    case 2: return dot_block<T, 2, 4>(qs, ks, n, d, 4);
    case 4: return dot_block<T, 4, 4>(qs, ks, n, d, 4);
    default:
      for (std::size_t g = 0; g < heads; ++g) dot_block<T, 1, 4>(qs + g, ks, n, d + 4 * g, 4);
  }
}

}  // namespace detail

/// Softmax attention of `heads` query heads that share keys 0..count-1.
///
/// keys(j)/values(j) return pointers to the head slice of key/value j;
/// allowed(j) filters columns. If probs is non-null, probs[g] receives head
/// g's normalized weights (zero for masked columns). Key order is the
/// summation order, which is what makes paged and contiguous storage agree.
/// Each head's result is the same as attending it alone.
template <class T, class KeyFn, class ValFn, class AllowFn>
inline void attend_heads(const T* const* qs, std::size_t heads, std::size_t head_dim, std::size_t count,
                         KeyFn&& keys, ValFn&& values, AllowFn&& allowed, T* const* outs,
                         T* const* probs = nullptr, std::vector<T>* scratch = nullptr) {
  std::vector<T> local;
  std::vector<T>& s = scratch ? *scratch : local;
  s.assign(heads * count, T(0));
  const T scale = T(1) / std::sqrt(T(head_dim));
  T mx_fixed[16];
  std::vector<T> mx_heap;
  T* mx = heads <= 16 ? mx_fixed : (mx_heap.resize(heads), mx_heap.data());
  std::fill(mx, mx + heads, -std::numeric_limits<T>::infinity());
  bool any = false;
  const T* ks[4];
  std::size_t idx[4], m = 0;
  auto flush = [&] {
    T d[4 * 8];
    for (std::size_t g0 = 0; g0 < heads; g0 += 8) {
      const std::size_t hg = std::min<std::size_t>(8, heads - g0);
      if (m == 4) {
        detail::score_four<T>(qs + g0, hg, ks, head_dim, d);
      } else {
        for (std::size_t g = 0; g < hg; ++g)
          for (std::size_t i = 0; i < m; ++i) d[4 * g + i] = dot(qs[g0 + g], ks[i], head_dim);
      }
      for (std::size_t g = 0; g < hg; ++g)
        for (std::size_t i = 0; i < m; ++i) {
          T& sc = s[(g0 + g) * count + idx[i]];
          sc = d[4 * g + i] * scale;
          mx[g0 + g] = std::max(mx[g0 + g], sc);
        }
    }
    m = 0;
  };
  for (std::size_t j = 0; j < count; ++j) {
    if (!allowed(j)) continue;
    any = true;
    idx[m] = j;
    ks[m++] = keys(j);
    if (m == 4) flush();
  }
  flush();
  for (std::size_t g = 0; g < heads; ++g) {
    std::fill(outs[g], outs[g] + head_dim, T(0));
    if (probs) std::fill(probs[g], probs[g] + count, T(0));
  }
  if (!any) return;
  for (std::size_t g = 0; g < heads; ++g) {
    T* sg = s.data() + g * count;
    for (std::size_t j = 0; j < count; ++j) sg[j] = allowed(j) ? sg[j] - mx[g] : T(0);
  }
  exp_inplace(s.data(), heads * count);
  for (std::size_t g = 0; g < heads; ++g) {
    T* sg = s.data() + g * count;
    T sum = 0;
    for (std::size_t j = 0; j < count; ++j)
      if (allowed(j)) sum += sg[j];
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < count; ++j)
      if (allowed(j)) {
        sg[j] *= inv;
        if (probs) probs[g][j] = sg[j];
      }
  }
  detail::weighted_sum(s.data(), heads, count, head_dim, values, allowed, outs);
}

/// Single-head form of attend_heads.
template <class T, class KeyFn, class ValFn, class AllowFn>
inline void attend_head(const T* q, std::size_t head_dim, std::size_t count, KeyFn&& keys, ValFn&& values,
                        AllowFn&& allowed, T* out, T* probs = nullptr, std::vector<T>* scratch = nullptr) {
  const T* qs[1] = {q};
  T* outs[1] = {out};
  T* ps[1] = {probs};
  attend_heads<T>(qs, 1, head_dim, count, keys, values, allowed, outs, probs ? ps : nullptr, scratch);
}

/// Index of the largest entry; ties resolve to the lowest index.
template <class T>
inline std::size_t argmax(const T* x, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

}  // namespace grc
