#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixres/errors.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

/// SplitMix64 finalizer; mixes a 64-bit value into a well-spread one.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a path of ids.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ull));
  return h;
}

/// Seeded generator for the augmentation draws. Identical seeds give
/// identical sequences.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }

  std::size_t uniform_int(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(eng_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Beta(a, b) via the ratio of two Gamma draws.
  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(eng_);
    const double y = std::gamma_distribution<double>(b, 1.0)(eng_);
    if (x + y == 0.0) return bernoulli(a / (a + b)) ? 1.0 : 0.0;  // both underflowed (tiny shape)
    return x / (x + y);
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_int(0, i - 1)]);
    return p;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

struct MixupConfig {
  double alpha = 1.0;
  bool enabled = true;
  // Diagnostic override: use this lambda for every sample instead of drawing.
  std::optional<double> forced_lambda;

  void validate() const {
    if (!(alpha > 0)) throw ConfigError("mixup alpha must be > 0, got " + std::to_string(alpha));
    if (forced_lambda && !(*forced_lambda >= 0 && *forced_lambda <= 1))
      throw ConfigError("forced mixup lambda must lie in [0, 1]");
  }
};

template <class T>
struct MixupDraw {
  Tensor<T> mixed_inputs;
  Tensor<T> mixed_targets;
  std::vector<double> lambda;
  std::vector<std::size_t> index;
};

template <class T = float>
Tensor<T> one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor<T> out({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw ValidationError("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    out[i * num_classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return out;
}

/// n i.i.d. draws from the symmetric Beta(alpha, alpha).
inline std::vector<double> sample_beta(double alpha, std::size_t n, Rng& rng) {
  if (!(alpha > 0)) throw ConfigError("sample_beta: alpha must be > 0, got " + std::to_string(alpha));
  std::vector<double> out(n);
  for (auto& v : out) v = rng.beta(alpha, alpha);
  return out;
}

/// Mixes sample i with sample index[i] using weight lambda[i]:
/// x_i' = lambda_i * x_i + (1 - lambda_i) * x_index[i], same for targets.
template <class T>
MixupDraw<T> mixup_with(const Tensor<T>& inputs, const Tensor<T>& targets, std::vector<double> lambda,
                        std::vector<std::size_t> index) {
  const std::size_t n = inputs.rank() ? inputs.dim(0) : 0;
  if (n < 1) throw DimensionError("mixup: empty batch");
  if (targets.rank() != 2 || targets.dim(0) != n)
    throw DimensionError("mixup: inputs have batch " + std::to_string(n) + " but targets have shape " +
                         to_string(targets.shape()));
  if (lambda.size() != n || index.size() != n) throw DimensionError("mixup: lambda/index length must equal batch");
  std::vector<bool> seen(n, false);
  for (auto j : index) {
    if (j >= n || seen[j]) throw ValidationError("mixup: index is not a permutation");
    seen[j] = true;
  }
  auto mix = [&](const Tensor<T>& src) {
    Tensor<T> out(src.shape());
    const std::size_t per = src.numel() / n;
    for (std::size_t i = 0; i < n; ++i) {
      const double l = lambda[i];
      const T* a = src.data().data() + i * per;
      const T* b = src.data().data() + index[i] * per;
      T* o = out.data().data() + i * per;
      for (std::size_t k = 0; k < per; ++k)
        o[k] = static_cast<T>(l * static_cast<double>(a[k]) + (1.0 - l) * static_cast<double>(b[k]));
    }
    return out;
  };
  return MixupDraw<T>{mix(inputs), mix(targets), std::move(lambda), std::move(index)};
}

/// Draws per-sample lambda ~ Beta(alpha, alpha) (length-N vector) and one
/// shared random permutation, then mixes inputs and targets.
template <class T>
MixupDraw<T> mixup(const Tensor<T>& inputs, const Tensor<T>& targets, const MixupConfig& config, Rng& rng) {
  config.validate();
  const std::size_t n = inputs.rank() ? inputs.dim(0) : 0;
  if (targets.rank() != 2 || targets.dim(0) != n)
    throw DimensionError("mixup: inputs have batch " + std::to_string(n) + " but targets have shape " +
                         to_string(targets.shape()));
  std::vector<double> lambda = sample_beta(config.alpha, n, rng);
  if (config.forced_lambda) std::fill(lambda.begin(), lambda.end(), *config.forced_lambda);
  std::vector<std::size_t> index = rng.permutation(n);
  return mixup_with(inputs, targets, std::move(lambda), std::move(index));
}

struct CropOffset {
  std::size_t dy = 0, dx = 0;
};

/// Zero-pads each image by `pad` and crops the original-size window whose
/// top-left corner sits at the given offset (each in [0, 2 * pad]).
template <class T>
Tensor<T> crop_with_offsets(const Tensor<T>& images, std::size_t pad, std::span<const CropOffset> offsets) {
  if (images.rank() != 4) throw DimensionError("random_crop: expected NCHW images");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (offsets.size() != N) throw DimensionError("random_crop: one offset per image required");
  Tensor<T> out(images.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const auto [dy, dx] = offsets[n];
    if (dy > 2 * pad || dx > 2 * pad) throw ValidationError("random_crop: offset outside [0, 2*pad]");
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y) {
        const long sy = static_cast<long>(y + dy) - static_cast<long>(pad);
        if (sy < 0 || sy >= static_cast<long>(H)) continue;
        for (std::size_t x = 0; x < W; ++x) {
          const long sx = static_cast<long>(x + dx) - static_cast<long>(pad);
          if (sx < 0 || sx >= static_cast<long>(W)) continue;
          out[((n * C + c) * H + y) * W + x] = images[((n * C + c) * H + sy) * W + sx];
        }
      }
  }
  return out;
}

template <class T>
Tensor<T> random_crop(const Tensor<T>& images, std::size_t pad, Rng& rng) {
  if (images.rank() != 4) throw DimensionError("random_crop: expected NCHW images");
  std::vector<CropOffset> offsets(images.dim(0));
  for (auto& o : offsets) {
    o.dy = rng.uniform_int(0, 2 * pad);
    o.dx = rng.uniform_int(0, 2 * pad);
  }
  return crop_with_offsets(images, pad, offsets);
}

/// Mirrors along the width axis every image whose mask entry is set.
template <class T>
Tensor<T> flip_with_mask(const Tensor<T>& images, const std::vector<bool>& mask) {
  if (images.rank() != 4) throw DimensionError("horizontal_flip: expected NCHW images");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (mask.size() != N) throw DimensionError("horizontal_flip: one mask entry per image required");
  Tensor<T> out = images.clone();
  out.set_requires_grad(false);
  for (std::size_t n = 0; n < N; ++n) {
    if (!mask[n]) continue;
    for (std::size_t r = 0; r < C * H; ++r) {
      T* row = out.data().data() + (n * C * H + r) * W;
      std::reverse(row, row + W);
    }
  }
  return out;
}

template <class T>
Tensor<T> horizontal_flip(const Tensor<T>& images, double p, Rng& rng) {
  if (!(p >= 0 && p <= 1)) throw ConfigError("horizontal_flip: p must lie in [0, 1]");
  if (images.rank() != 4) throw DimensionError("horizontal_flip: expected NCHW images");
  std::vector<bool> mask(images.dim(0));
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(p);
  return flip_with_mask(images, mask);
}

}  // namespace mixres
