#pragma once

// Differentiable tensor operations. Each op computes its forward result
// eagerly and, when a tape is recording and some input requires a gradient,
// records a backward rule on that tape.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "mixres/errors.hpp"
#include "mixres/gemm.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

enum class Mode { Train, Eval };

/// Probability floor applied before the log in log_softmax_clamped.
inline constexpr double kProbFloor = 1e-5;

namespace detail {

template <class T>
Tensor<T> make_output(Shape shape, Tape<T>* tape) {
  Tensor<T> out(std::move(shape));
  if (tape) out.set_requires_grad(true);
  return out;
}

inline void require_rank(const char* op, const char* arg, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                         to_string(s));
}

struct ConvGeometry {
  std::size_t n, c, h, w;    // input
  std::size_t o, kh, kw;     // weight
  std::size_t oh, ow;        // output
  std::size_t stride, pad;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline std::size_t conv_out_extent(const char* axis, std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad, bool floor_output) {
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel || (!floor_output && (padded - kernel) % stride != 0))
    throw ConfigError(std::string("conv2d: ") + axis + " output size (" + std::to_string(in) + " + 2*" +
                      std::to_string(pad) + " - " + std::to_string(kernel) + ") / " + std::to_string(stride) +
                      " + 1 is not a positive integer");
  return (padded - kernel) / stride + 1;
}

/// Unfolds one image (C x H x W) into col[K x P], K ordered (c, ki, kj);
/// rows of col are ld apart.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w);
            dst[oy * g.ow + ox] = inside ? img[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
}

/// Transposed unfold: colT[P x K].
template <class T>
void im2col_transposed(const T* img, const ConvGeometry& g, T* colT) {
  const std::size_t K = g.k();
  for (std::size_t oy = 0; oy < g.oh; ++oy)
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      T* dst = colT + (oy * g.ow + ox) * K;
      for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w);
            *dst++ = inside ? img[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
    }
}

/// Folds col[K x P] (rows ld apart) back, accumulating into img (C x H x W).
template <class T>
void col2im_accumulate(const T* col, const ConvGeometry& g, T* img, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += src[oy * g.ow + ox];
          }
        }
      }
}

/// Images per GEMM call in conv2d: small feature maps are batched side by
/// side so the column dimension fills the register tiles.
inline std::size_t conv_group(const ConvGeometry& g) {
  constexpr std::size_t kMinColumns = 256;
  return std::max<std::size_t>(1, std::min(g.n, kMinColumns / std::max<std::size_t>(g.p(), 1)));
}

/// Copies rows [rows x P] of each of cnt images (image stride img_stride)
/// into one [rows x cnt*P] block.
template <class T>
void gather_rows(const T* src, std::size_t cnt, std::size_t img_stride, std::size_t rows, std::size_t P, T* dst) {
  for (std::size_t j = 0; j < cnt; ++j)
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + j * img_stride + r * P, P, dst + r * cnt * P + j * P);
}

template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// Reductions over a contiguous run in double with eight interleaved partial
// sums; the summation order is fixed, so results are reproducible.
inline constexpr std::size_t kLanes = 8;

inline double combine_lanes(const double* acc) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
double sum_d(const T* p, std::size_t n) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += static_cast<double>(p[i + l]);
  for (; i < n; ++i) acc[i % kLanes] += static_cast<double>(p[i]);
  return combine_lanes(acc);
}

/// sum (p - mu)^2
template <class T>
double sum_sq_dev(const T* p, std::size_t n, double mu) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) {
      const double d = static_cast<double>(p[i + l]) - mu;
      acc[l] += d * d;
    }
  for (; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - mu;
    acc[i % kLanes] += d * d;
  }
  return combine_lanes(acc);
}

/// sum g * (p - mu)
template <class T>
double dot_dev(const T* g, const T* p, std::size_t n, double mu) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l)
      acc[l] += static_cast<double>(g[i + l]) * (static_cast<double>(p[i + l]) - mu);
  for (; i < n; ++i) acc[i % kLanes] += static_cast<double>(g[i]) * (static_cast<double>(p[i]) - mu);
  return combine_lanes(acc);
}

/// Single-precision exp for arguments in roughly [-87, 88]: 2^n * p(r) with a
/// degree-6 polynomial on |r| <= ln2/2. Results below the clamp flush to
/// about 1e-38. Written without branches or library calls so it vectorizes.
inline float exp_f32(float a) {
  float x = a > 88.0f ? 88.0f : a;
  x = x < -87.0f ? -87.0f : x;
  // Round to nearest through the 1.5 * 2^23 trick; std::floor would not vectorize.
  const float n = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
  const float r = (x - n * 0.693359375f) - n * -2.12194440e-4f;
  float p = 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = (p * r) * r + r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

/// Single-precision erf: a 13/8-degree odd/even rational interpolant on
/// [-4, 4] (Eigen's coefficients), a few ulp from the true value; outside
/// that range erf rounds to +-1 in float. Branch-free so loops vectorize.
inline float erf_f32(float a) {
  float x = a > 4.0f ? 4.0f : a;
  x = x < -4.0f ? -4.0f : x;
  const float x2 = x * x;
  float p = x2 * -2.72614225801306e-10f + 2.77068142495902e-08f;
  p = x2 * p + -2.10102402082508e-06f;
  p = x2 * p + -5.69250639462346e-05f;
  p = x2 * p + -7.34990630326855e-04f;
  p = x2 * p + -2.95459980854025e-03f;
  p = x2 * p + -1.60960333262415e-02f;
  p = x * p;
  float q = x2 * -1.45660718464996e-05f + -2.13374055278905e-04f;
  q = x2 * q + -1.68282697438203e-03f;
  q = x2 * q + -7.37332916720468e-03f;
  q = x2 * q + -1.42647390514189e-02f;
  return p / q;
}

}  // namespace detail

/// How conv2d treats (H + 2 * padding - kh) not divisible by the stride:
/// Exact rejects it, Floor drops the trailing rows/columns no window reaches.
enum class ConvOutput { Exact, Floor };

/// 2-D cross-correlation over NCHW input with OIHW weights.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                 std::size_t padding, ConvOutput rounding = ConvOutput::Exact) {
  detail::require_rank("conv2d", "input", input.shape(), 4);
  detail::require_rank("conv2d", "weight", weight.shape(), 4);
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (input.dim(1) != weight.dim(1))
    throw DimensionError("conv2d: input has " + std::to_string(input.dim(1)) + " channels but weight expects " +
                         std::to_string(weight.dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0)))
    throw DimensionError("conv2d: bias shape " + to_string(bias->shape()) + " does not match " +
                         std::to_string(weight.dim(0)) + " output channels");

  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                         weight.dim(3), 0, 0, stride, padding};
  const bool floor_output = rounding == ConvOutput::Floor;
  g.oh = detail::conv_out_extent("height", g.h, g.kh, stride, padding, floor_output);
  g.ow = detail::conv_out_extent("width", g.w, g.kw, stride, padding, floor_output);

  Tape<T>* tape = detail::recording_tape<T>({&input, &weight, bias});
  Tensor<T> out = detail::make_output<T>(Shape{g.n, g.o, g.oh, g.ow}, tape);

  const std::size_t K = g.k(), P = g.p();
  const T* x = input.data().data();
  const T* w = weight.data().data();
  T* y = out.data().data();
  const std::size_t G = detail::conv_group(g);
  const std::size_t in_stride = g.c * g.h * g.w;
  std::vector<T> col(G > 1 || !g.pointwise() ? K * G * P : 0);
  std::vector<T> ybuf(G > 1 ? g.o * G * P : 0);
  for (std::size_t n0 = 0; n0 < g.n; n0 += G) {
    const std::size_t cnt = std::min(G, g.n - n0);
    const std::size_t ld = cnt * P;
    const T* b = x + n0 * in_stride;
    if (!g.pointwise()) {
      for (std::size_t j = 0; j < cnt; ++j) detail::im2col(b + j * in_stride, g, col.data() + j * P, ld);
      b = col.data();
    } else if (cnt > 1) {
      detail::gather_rows(b, cnt, in_stride, K, P, col.data());
      b = col.data();
    }
    if (cnt == 1) {
      detail::gemm_accumulate<T>(g.o, P, K, {w, K, 1}, b, P, y + n0 * g.o * P, P);
    } else {
      std::fill(ybuf.begin(), ybuf.begin() + g.o * ld, T(0));
      detail::gemm_accumulate<T>(g.o, ld, K, {w, K, 1}, b, ld, ybuf.data(), ld);
      for (std::size_t j = 0; j < cnt; ++j)
        for (std::size_t o = 0; o < g.o; ++o)
          std::copy_n(ybuf.data() + o * ld + j * P, P, y + ((n0 + j) * g.o + o) * P);
    }
  }
  if (bias) {
    const T* bv = bias->data().data();
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.o; ++o)
        for (std::size_t p = 0; p < P; ++p) y[(n * g.o + o) * P + p] += bv[o];
  }

  if (tape) {
    auto xs = input.storage(), ws = weight.storage(), ys = out.storage();
    auto bs = bias ? bias->storage() : nullptr;
    tape->record(ys, [xs, ws, bs, ys, g] {
      const std::size_t K = g.k(), P = g.p();
      const T f = detail::fault_factor<T>("conv2d");
      const std::vector<T>& dy = ys->grad;
      const std::size_t G = detail::conv_group(g);
      const std::size_t in_stride = g.c * g.h * g.w, out_stride = g.o * P;
      std::vector<T> dyf;
      const T* dyp = dy.data();
      if (f != T(1)) {
        dyf.assign(dy.begin(), dy.end());
        for (auto& v : dyf) v *= f;
        dyp = dyf.data();
      }
      std::vector<T> buf(std::max(K * G * P, std::size_t{1}));
      std::vector<T> dyg(G > 1 ? g.o * G * P : 0);
      for (std::size_t n0 = 0; n0 < g.n; n0 += G) {
        const std::size_t cnt = std::min(G, g.n - n0);
        const std::size_t ld = cnt * P;
        // dy for this group as [O x cnt*P]
        const T* dyc = dyp + n0 * out_stride;
        if (cnt > 1) {
          detail::gather_rows(dyc, cnt, out_stride, g.o, P, dyg.data());
          dyc = dyg.data();
        }
        if (ws->requires_grad) {
          // Stacked transposed columns [cnt*P x K]; images in order, so each
          // weight gradient still sums positions image by image.
          for (std::size_t j = 0; j < cnt; ++j) {
            const T* img = xs->data.data() + (n0 + j) * in_stride;
            if (g.pointwise())
              detail::transpose(img, K, P, buf.data() + j * P * K);
            else
              detail::im2col_transposed(img, g, buf.data() + j * P * K);
          }
          detail::gemm_accumulate<T>(g.o, K, ld, {dyc, ld, 1}, buf.data(), K, detail::grad_of(*ws).data(), K);
        }
        if (xs->requires_grad) {
          auto& dx = detail::grad_of(*xs);
          if (g.pointwise() && cnt == 1) {
            detail::gemm_accumulate<T>(K, P, g.o, {ws->data.data(), 1, K}, dyc, P, dx.data() + n0 * in_stride, P);
          } else {
            std::fill(buf.begin(), buf.begin() + K * ld, T(0));
            detail::gemm_accumulate<T>(K, ld, g.o, {ws->data.data(), 1, K}, dyc, ld, buf.data(), ld);
            for (std::size_t j = 0; j < cnt; ++j) {
              T* dimg = dx.data() + (n0 + j) * in_stride;
              if (g.pointwise()) {
                for (std::size_t r = 0; r < K; ++r) {
                  const T* src = buf.data() + r * ld + j * P;
                  T* dst = dimg + r * P;
                  for (std::size_t p = 0; p < P; ++p) dst[p] += src[p];
                }
              } else {
                detail::col2im_accumulate(buf.data() + j * P, g, dimg, ld);
              }
            }
          }
        }
      }
      if (bs && bs->requires_grad) {
        auto& db = detail::grad_of(*bs);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.o; ++o) {
            T acc = 0;
            const T* row = dyp + (n * g.o + o) * P;
            for (std::size_t p = 0; p < P; ++p) acc += row[p];
            db[o] += acc;
          }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride = 1, std::size_t padding = 0) {
  return conv2d<T>(input, weight, nullptr, stride, padding);
}

/// Per-channel running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
  explicit BatchNormStats(std::size_t channels = 0) : mean(channels, T(0)), var(channels, T(1)) {}
};

/// Batch normalization over (N, H, W) for each channel of NCHW input.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running stats with weight `momentum`.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormStats<T>& stats, Mode mode, double eps = 1e-5, double momentum = 0.1) {
  detail::require_rank("batch_norm2d", "input", input.shape(), 4);
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || stats.mean.size() != C || stats.var.size() != C)
    throw DimensionError("batch_norm2d: input has " + std::to_string(C) +
                         " channels but parameters/stats have " + std::to_string(gamma.numel()));
  const std::size_t M = N * HW;
  if (mode == Mode::Train && M < 2)
    throw UsageError("batch_norm2d: train mode needs at least 2 values per channel");

  Tape<T>* tape = detail::recording_tape<T>({&input, &gamma, &beta});
  Tensor<T> out = detail::make_output<T>(input.shape(), tape);

  const T* x = input.data().data();
  T* y = out.data().data();
  std::vector<double> mean(C), istd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::Train) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) s += detail::sum_d(x + (n * C + c) * HW, HW);
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n) ss += detail::sum_sq_dev(x + (n * C + c) * HW, HW, mu);
      const double var = ss / static_cast<double>(M);
      mean[c] = mu;
      istd[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = ss / static_cast<double>(M - 1);
      stats.mean[c] = static_cast<T>((1.0 - momentum) * stats.mean[c] + momentum * mu);
      stats.var[c] = static_cast<T>((1.0 - momentum) * stats.var[c] + momentum * unbiased);
    } else {
      mean[c] = stats.mean[c];
      istd[c] = 1.0 / std::sqrt(static_cast<double>(stats.var[c]) + eps);
    }
    // y = a * x + b with a = gamma / std, b = beta - a * mean, evaluated in double.
    const double a = static_cast<double>(gamma[c]) * istd[c], b = static_cast<double>(beta[c]) - a * mean[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x + (n * C + c) * HW;
      T* q = y + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) q[i] = static_cast<T>(a * static_cast<double>(p[i]) + b);
    }
  }

  if (tape) {
    auto xs = input.storage(), gs = gamma.storage(), bs = beta.storage(), ys = out.storage();
    tape->record(ys, [xs, gs, bs, ys, mean = std::move(mean), istd = std::move(istd), N, C, HW, M, mode] {
      const double f = detail::fault_factor<double>("batch_norm2d");
      const T* x = xs->data.data();
      const T* dy = ys->grad.data();
      T* dx = xs->requires_grad ? detail::grad_of(*xs).data() : nullptr;
      T* dg = gs->requires_grad ? detail::grad_of(*gs).data() : nullptr;
      T* db = bs->requires_grad ? detail::grad_of(*bs).data() : nullptr;
      for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0, sum_dy_dev = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * HW;
          sum_dy += detail::sum_d(dy + off, HW);
          sum_dy_dev += detail::dot_dev(dy + off, x + off, HW, mean[c]);
        }
        const double sum_dy_xhat = sum_dy_dev * istd[c];
        if (dg) dg[c] += static_cast<T>(f * sum_dy_xhat);
        if (db) db[c] += static_cast<T>(f * sum_dy);
        if (!dx) continue;
        const double gm = gs->data[c];
        for (std::size_t n = 0; n < N; ++n) {
          const T* p = x + (n * C + c) * HW;
          const T* g = dy + (n * C + c) * HW;
          T* q = dx + (n * C + c) * HW;
          if (mode == Mode::Train) {
            // dx = k * (M * dy - sum_dy - xhat * sum_dy_xhat), expanded to
            // c1 * dy + c2 * x + c0.
            const double k = f * gm * istd[c] / static_cast<double>(M);
            const double c1 = k * static_cast<double>(M), c2 = -k * istd[c] * sum_dy_xhat;
            const double c0 = -k * sum_dy - c2 * mean[c];
            for (std::size_t i = 0; i < HW; ++i)
              q[i] += static_cast<T>(c1 * static_cast<double>(g[i]) + c2 * static_cast<double>(p[i]) + c0);
          } else {
            for (std::size_t i = 0; i < HW; ++i) q[i] += static_cast<T>(f * gm * istd[c] * g[i]);
          }
        }
      }
    });
  }
  return out;
}

/// GELU: x * Phi(x), Phi the standard normal CDF via erf. Double precision
/// uses the library erfc; single precision uses erf_f32.
template <class T>
Tensor<T> gelu(const Tensor<T>& input) {
  Tape<T>* tape = detail::recording_tape<T>({&input});
  Tensor<T> out = detail::make_output<T>(input.shape(), tape);
  const T* x = input.data().data();
  T* y = out.data().data();
  const std::size_t n = input.numel();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  if constexpr (std::is_same_v<T, float>) {
    for (std::size_t i = 0; i < n; ++i)
      y[i] = 0.5f * x[i] * (1.0f + detail::erf_f32(x[i] * static_cast<float>(kInvSqrt2)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[i];
      y[i] = static_cast<T>(v * 0.5 * std::erfc(-v * kInvSqrt2));
    }
  }
  if (tape) {
    auto xs = input.storage(), ys = out.storage();
    tape->record(ys, [xs, ys, n] {
      const double f = detail::fault_factor<double>("gelu");
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      T* dx = detail::grad_of(*xs).data();
      const T* dy = ys->grad.data();
      const T* x = xs->data.data();
      if constexpr (std::is_same_v<T, float>) {
        std::vector<float> d(n);
        for (std::size_t i = 0; i < n; ++i) d[i] = detail::exp_f32(-0.5f * x[i] * x[i]);
        const float ff = static_cast<float>(f);
        for (std::size_t i = 0; i < n; ++i) {
          const float cdf = 0.5f * (1.0f + detail::erf_f32(x[i] * static_cast<float>(kInvSqrt2)));
          const float pdf = static_cast<float>(kInvSqrt2Pi) * d[i];
          dx[i] += ff * dy[i] * (cdf + x[i] * pdf);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          const double v = x[i];
          const double cdf = 0.5 * std::erfc(-v * kInvSqrt2);
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          dx[i] += static_cast<T>(f * dy[i] * (cdf + v * pdf));
        }
      }
    });
  }
  return out;
}

/// log(clamp(softmax(logits, axis=1), 1e-5, 1)) for [N, K] logits.
///
/// Backward treats the clamp as a gate: entries whose probability was
/// clamped receive no gradient through their log.
template <class T>
Tensor<T> log_softmax_clamped(const Tensor<T>& logits) {
  detail::require_rank("log_softmax_clamped", "logits", logits.shape(), 2);
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw DimensionError("log_softmax_clamped: need at least 2 classes, got " + std::to_string(K));
  Tape<T>* tape = detail::recording_tape<T>({&logits});
  Tensor<T> out = detail::make_output<T>(logits.shape(), tape);
  std::vector<T> prob(N * K);
  const T* z = logits.data().data();
  T* y = out.data().data();
  const T floor = static_cast<T>(kProbFloor);
  for (std::size_t n = 0; n < N; ++n) {
    const T* zr = z + n * K;
    T mx = zr[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, zr[k]);
    double denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(zr[k] - mx));
    for (std::size_t k = 0; k < K; ++k) {
      const T p = static_cast<T>(std::exp(static_cast<double>(zr[k] - mx)) / denom);
      prob[n * K + k] = p;
      y[n * K + k] = std::log(std::clamp(p, floor, T(1)));
    }
  }
  if (tape) {
    auto zs = logits.storage(), ys = out.storage();
    tape->record(ys, [zs, ys, prob = std::move(prob), N, K, floor] {
      const double f = detail::fault_factor<double>("log_softmax_clamped");
      auto& dz = detail::grad_of(*zs);
      const auto& dy = ys->grad;
      for (std::size_t n = 0; n < N; ++n) {
        // With u_k = dy_k * gate_k / q_k, dz_j = p_j * (u_j - sum_k p_k u_k);
        // p_k u_k reduces to dy_k * gate_k because q_k = p_k where the gate is open.
        double total = 0;
        for (std::size_t k = 0; k < K; ++k) {
          const T p = prob[n * K + k];
          if (p >= floor && p <= T(1)) total += dy[n * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) {
          const T p = prob[n * K + k];
          const double a = (p >= floor && p <= T(1)) ? static_cast<double>(dy[n * K + k]) : 0.0;
          dz[n * K + k] += static_cast<T>(f * (a - p * total));
        }
      }
    });
  }
  return out;
}

/// Affine map: input[N,F] * weight[K,F]^T + bias[K].
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank("linear", "input", input.shape(), 2);
  detail::require_rank("linear", "weight", weight.shape(), 2);
  const std::size_t N = input.dim(0), F = input.dim(1), K = weight.dim(0);
  if (weight.dim(1) != F)
    throw DimensionError("linear: input has " + std::to_string(F) + " features but weight expects " +
                         std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != K)
    throw DimensionError("linear: bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(K) +
                         " outputs");
  Tape<T>* tape = detail::recording_tape<T>({&input, &weight, &bias});
  Tensor<T> out = detail::make_output<T>(Shape{N, K}, tape);
  std::vector<T> wt(F * K);
  detail::transpose(weight.data().data(), K, F, wt.data());
  T* y = out.data().data();
  detail::gemm_accumulate<T>(N, K, F, {input.data().data(), F, 1}, wt.data(), K, y, K);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) y[n * K + k] += bias[k];

  if (tape) {
    auto xs = input.storage(), ws = weight.storage(), bs = bias.storage(), ys = out.storage();
    tape->record(ys, [xs, ws, bs, ys, N, F, K] {
      const T f = detail::fault_factor<T>("linear");
      std::vector<T> dy = ys->grad;
      if (f != T(1))
        for (auto& v : dy) v *= f;
      if (xs->requires_grad)
        detail::gemm_accumulate<T>(N, F, K, {dy.data(), K, 1}, ws->data.data(), F, detail::grad_of(*xs).data(), F);
      if (ws->requires_grad)
        detail::gemm_accumulate<T>(K, F, N, {dy.data(), 1, K}, xs->data.data(), F, detail::grad_of(*ws).data(), F);
      if (bs->requires_grad) {
        auto& db = detail::grad_of(*bs);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k) db[k] += dy[n * K + k];
      }
    });
  }
  return out;
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require_rank("global_avg_pool", "input", input.shape(), 4);
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Tape<T>* tape = detail::recording_tape<T>({&input});
  Tensor<T> out = detail::make_output<T>(Shape{N, C}, tape);
  const T* x = input.data().data();
  for (std::size_t i = 0; i < N * C; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < HW; ++j) s += x[i * HW + j];
    out[i] = static_cast<T>(s / static_cast<double>(HW));
  }
  if (tape) {
    auto xs = input.storage(), ys = out.storage();
    tape->record(ys, [xs, ys, N, C, HW] {
      const double f = detail::fault_factor<double>("global_avg_pool");
      auto& dx = detail::grad_of(*xs);
      for (std::size_t i = 0; i < N * C; ++i) {
        const T g = static_cast<T>(f * ys->grad[i] / static_cast<double>(HW));
        for (std::size_t j = 0; j < HW; ++j) dx[i * HW + j] += g;
      }
    });
  }
  return out;
}

namespace detail {

/// Checks the exact-shape-or-scalar broadcasting rule; returns the result shape.
template <class T>
Shape broadcast_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.is_scalar()) return a.shape();
  if (a.is_scalar()) return b.shape();
  throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                       " differ (only exact-shape and scalar operands are allowed)");
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = detail::broadcast_shape("add", a, b);
  Tape<T>* tape = detail::recording_tape<T>({&a, &b});
  Tensor<T> out = detail::make_output<T>(shape, tape);
  const std::size_t n = out.numel();
  const bool sa = a.numel() != n, sb = b.numel() != n;
  for (std::size_t i = 0; i < n; ++i) out[i] = a[sa ? 0 : i] + b[sb ? 0 : i];
  if (tape) {
    auto as = a.storage(), bs = b.storage(), ys = out.storage();
    tape->record(ys, [as, bs, ys, n, sa, sb] {
      const T f = detail::fault_factor<T>("add");
      const auto& dy = ys->grad;
      for (auto [s, scalar] : {std::pair{as, sa}, std::pair{bs, sb}}) {
        if (!s->requires_grad) continue;
        auto& g = detail::grad_of(*s);
        for (std::size_t i = 0; i < n; ++i) g[scalar ? 0 : i] += f * dy[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = detail::broadcast_shape("mul", a, b);
  Tape<T>* tape = detail::recording_tape<T>({&a, &b});
  Tensor<T> out = detail::make_output<T>(shape, tape);
  const std::size_t n = out.numel();
  const bool sa = a.numel() != n, sb = b.numel() != n;
  for (std::size_t i = 0; i < n; ++i) out[i] = a[sa ? 0 : i] * b[sb ? 0 : i];
  if (tape) {
    auto as = a.storage(), bs = b.storage(), ys = out.storage();
    tape->record(ys, [as, bs, ys, n, sa, sb] {
      const T f = detail::fault_factor<T>("mul");
      const auto& dy = ys->grad;
      if (as->requires_grad) {
        auto& g = detail::grad_of(*as);
        for (std::size_t i = 0; i < n; ++i) g[sa ? 0 : i] += f * dy[i] * bs->data[sb ? 0 : i];
      }
      if (bs->requires_grad) {
        auto& g = detail::grad_of(*bs);
        for (std::size_t i = 0; i < n; ++i) g[sb ? 0 : i] += f * dy[i] * as->data[sa ? 0 : i];
      }
    });
  }
  return out;
}

/// Multiplies every element by a constant.
template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tape<T>* tape = detail::recording_tape<T>({&a});
  Tensor<T> out = detail::make_output<T>(a.shape(), tape);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
  if (tape) {
    auto as = a.storage(), ys = out.storage();
    tape->record(ys, [as, ys, factor] {
      const T f = detail::fault_factor<T>("scale");
      auto& g = detail::grad_of(*as);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * factor * ys->grad[i];
    });
  }
  return out;
}

/// Sum of all elements as a scalar tensor (sequential, double accumulator).
template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tape<T>* tape = detail::recording_tape<T>({&a});
  Tensor<T> out = detail::make_output<T>(Shape{1}, tape);
  double s = 0;
  for (T v : a.data()) s += v;
  out[0] = static_cast<T>(s);
  if (tape) {
    auto as = a.storage(), ys = out.storage();
    tape->record(ys, [as, ys] {
      const T g0 = detail::fault_factor<T>("sum_all") * ys->grad[0];
      auto& g = detail::grad_of(*as);
      for (auto& v : g) v += g0;
    });
  }
  return out;
}

}  // namespace mixres
