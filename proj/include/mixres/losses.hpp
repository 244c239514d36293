#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mixres/errors.hpp"
#include "mixres/ops.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

enum class Reduction { Mean, Sum };

inline const char* to_string(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

inline Reduction parse_reduction(const std::string& s) {
  if (s == "mean") return Reduction::Mean;
  if (s == "sum") return Reduction::Sum;
  throw ConfigError("loss reduction must be 'mean' or 'sum', got '" + s + "'");
}

template <class T>
struct LossValue {
  Tensor<T> total;  // scalar, connected to the tape when one is recording
  std::vector<double> per_sample;
  Reduction reduction = Reduction::Mean;
};

/// Cross-entropy -sum_k target[i,k] * log_probs[i,k] per row, reduced by
/// sum or mean over the batch.
template <class T>
LossValue<T> cross_entropy(const Tensor<T>& target, const Tensor<T>& log_probs, Reduction reduction = Reduction::Mean) {
  if (target.rank() != 2 || target.shape() != log_probs.shape())
    throw DimensionError("cross_entropy: target " + to_string(target.shape()) + " and log-probs " +
                         to_string(log_probs.shape()) + " must be equal [N, K] shapes");
  const std::size_t N = target.dim(0), K = target.dim(1);
  LossValue<T> out{Tensor<T>(), std::vector<double>(N, 0.0), reduction};
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T t = target[i * K + k], lp = log_probs[i * K + k];
      if (t < T(0)) throw ValidationError("cross_entropy: negative target entry at row " + std::to_string(i));
      if (!std::isfinite(static_cast<double>(lp)))
        throw ValidationError("cross_entropy: non-finite log-probability at row " + std::to_string(i));
      s -= static_cast<double>(t) * static_cast<double>(lp);
    }
    out.per_sample[i] = s;
  }
  const T factor = reduction == Reduction::Mean ? T(-1) / static_cast<T>(N) : T(-1);
  out.total = scale(sum_all(mul(log_probs, target)), factor);
  return out;
}

/// Cross-entropy of the mixed soft targets against the clamped log-softmax
/// of the logits.
template <class T>
LossValue<T> mixup_loss(const Tensor<T>& logits, const Tensor<T>& mixed_targets,
                        Reduction reduction = Reduction::Mean) {
  if (logits.shape() != mixed_targets.shape())
    throw DimensionError("mixup_loss: logits " + to_string(logits.shape()) + " vs targets " +
                         to_string(mixed_targets.shape()));
  return cross_entropy(mixed_targets, log_softmax_clamped(logits), reduction);
}

}  // namespace mixres
