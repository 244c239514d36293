#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mixres/ops.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

/// Central-difference gradient of a scalar function at x:
/// g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
///
/// `f` takes a tensor and returns anything convertible to double. It is
/// evaluated on a private copy of x, so x itself is left untouched.
template <class T, class F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, double eps) {
  if (!(eps > 0)) throw UsageError("finite_diff_grad: eps must be positive");
  Tensor<T> probe = x.detach();
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const T v = probe[i];
    probe[i] = static_cast<T>(v + eps);
    const double fp = static_cast<double>(f(probe));
    probe[i] = static_cast<T>(v - eps);
    const double fm = static_cast<double>(f(probe));
    probe[i] = v;
    g[i] = static_cast<T>((fp - fm) / (2.0 * eps));
  }
  return g;
}

/// Normwise relative error max|a - b| / max(max|a|, max|b|).
/// Returns 0 when both are identically zero.
template <class T>
double relative_error(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: size mismatch");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max({scale, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
  }
  return scale == 0 ? 0.0 : diff / scale;
}

struct GradCheckResult {
  std::string op;
  std::string precision;  // "f32" or "f64"
  int trials = 0;
  double worst_rel_error = 0;
  double threshold = 0;
  bool passed() const { return worst_rel_error < threshold; }
};

inline const std::vector<std::string>& differentiable_ops() {
  static const std::vector<std::string> ops{"conv2d", "batch_norm2d",    "gelu",  "log_softmax_clamped", "linear",
                                            "global_avg_pool", "add", "mul",  "scale", "sum_all"};
  return ops;
}

template <class T>
inline constexpr double kGradCheckThreshold = sizeof(T) == 4 ? 1e-3 : 1e-6;
template <class T>
inline constexpr double kGradCheckEps = sizeof(T) == 4 ? 1e-2 : 1e-6;

namespace detail {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  t.set_requires_grad(requires_grad);
  return t;
}

inline std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// One randomized instance of an op: its inputs and a forward closure.
template <class T>
struct OpCase {
  std::vector<Tensor<T>> inputs;  // the ones marked requires_grad are checked
  std::function<Tensor<T>(const std::vector<Tensor<T>>&)> forward;
};

template <class T>
OpCase<T> make_case(const std::string& op, std::mt19937_64& rng) {
  OpCase<T> c;
  auto pick = [&](std::size_t lo, std::size_t hi) { return uniform_int(rng, lo, hi); };
  if (op == "conv2d") {
    std::size_t k, stride, pad, h, w;
    do {
      k = pick(0, 1) ? 3 : 1;
      stride = pick(1, 2);
      pad = pick(0, 1);
      h = pick(3, 8);
      w = pick(3, 8);
    } while ((h + 2 * pad - k) % stride || (w + 2 * pad - k) % stride);
    const std::size_t n = pick(1, 2), ch = pick(1, 4), o = pick(1, 4);
    const bool with_bias = pick(0, 1);
    c.inputs = {random_tensor<T>({n, ch, h, w}, rng, -1, 1, true), random_tensor<T>({o, ch, k, k}, rng, -1, 1, true)};
    if (with_bias) c.inputs.push_back(random_tensor<T>({o}, rng, -1, 1, true));
    c.forward = [stride, pad](const std::vector<Tensor<T>>& in) {
      return conv2d<T>(in[0], in[1], in.size() > 2 ? &in[2] : nullptr, stride, pad);
    };
  } else if (op == "batch_norm2d") {
    const std::size_t n = pick(2, 3), ch = pick(1, 3), h = pick(2, 4), w = pick(2, 4);
    c.inputs = {random_tensor<T>({n, ch, h, w}, rng, -2, 2, true), random_tensor<T>({ch}, rng, 0.5, 1.5, true),
                random_tensor<T>({ch}, rng, -0.5, 0.5, true)};
    const bool eval = pick(0, 3) == 0;
    c.forward = [ch, eval](const std::vector<Tensor<T>>& in) {
      BatchNormStats<T> stats(ch);
      for (std::size_t i = 0; i < ch; ++i) {
        stats.mean[i] = static_cast<T>(0.1 * static_cast<double>(i));
        stats.var[i] = static_cast<T>(1.0 + 0.2 * static_cast<double>(i));
      }
      return batch_norm2d<T>(in[0], in[1], in[2], stats, eval ? Mode::Eval : Mode::Train, 1e-5, 0.1);
    };
  } else if (op == "gelu") {
    Shape s;
    const std::size_t rank = pick(1, 4);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(pick(1, 4));
    c.inputs = {random_tensor<T>(s, rng, -3, 3, true)};
    c.forward = [](const std::vector<Tensor<T>>& in) { return gelu<T>(in[0]); };
  } else if (op == "log_softmax_clamped") {
    // Logits in [-2, 2] keep every probability well above the clamp floor.
    c.inputs = {random_tensor<T>({pick(1, 4), pick(2, 10)}, rng, -2, 2, true)};
    c.forward = [](const std::vector<Tensor<T>>& in) { return log_softmax_clamped<T>(in[0]); };
  } else if (op == "linear") {
    const std::size_t n = pick(1, 4), f = pick(1, 6), k = pick(1, 5);
    c.inputs = {random_tensor<T>({n, f}, rng, -1, 1, true), random_tensor<T>({k, f}, rng, -1, 1, true),
                random_tensor<T>({k}, rng, -1, 1, true)};
    c.forward = [](const std::vector<Tensor<T>>& in) { return linear<T>(in[0], in[1], in[2]); };
  } else if (op == "global_avg_pool") {
    c.inputs = {random_tensor<T>({pick(1, 3), pick(1, 3), pick(1, 4), pick(1, 4)}, rng, -1, 1, true)};
    c.forward = [](const std::vector<Tensor<T>>& in) { return global_avg_pool<T>(in[0]); };
  } else if (op == "add" || op == "mul") {
    Shape s{pick(1, 3), pick(1, 4)};
    const std::size_t form = pick(0, 2);  // 0: same shape, 1: scalar rhs, 2: scalar lhs
    Shape sa = form == 2 ? Shape{1} : s, sb = form == 1 ? Shape{1} : s;
    c.inputs = {random_tensor<T>(sa, rng, -1, 1, true), random_tensor<T>(sb, rng, -1, 1, true)};
    if (op == "add")
      c.forward = [](const std::vector<Tensor<T>>& in) { return add<T>(in[0], in[1]); };
    else
      c.forward = [](const std::vector<Tensor<T>>& in) { return mul<T>(in[0], in[1]); };
  } else if (op == "scale") {
    const T factor = static_cast<T>(std::uniform_real_distribution<double>(-2, 2)(rng));
    c.inputs = {random_tensor<T>({pick(1, 3), pick(1, 4)}, rng, -1, 1, true)};
    c.forward = [factor](const std::vector<Tensor<T>>& in) { return scale<T>(in[0], factor); };
  } else if (op == "sum_all") {
    c.inputs = {random_tensor<T>({pick(1, 3), pick(1, 4), pick(1, 3)}, rng, -1, 1, true)};
    c.forward = [](const std::vector<Tensor<T>>& in) { return sum_all<T>(in[0]); };
  } else {
    throw UsageError("gradcheck: unknown op '" + op + "'");
  }
  return c;
}

/// Scalar probe sum_i y_i * r_i accumulated in double.
template <class T>
double project(const Tensor<T>& y, const Tensor<T>& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * static_cast<double>(r[i]);
  return s;
}

}  // namespace detail

/// Worst normwise relative error between backward() and finite differences
/// for one randomized instance of `op`, over all of its inputs.
template <class T>
double gradcheck_trial(const std::string& op, std::mt19937_64& rng) {
  auto c = detail::make_case<T>(op, rng);
  Tensor<T> probe_out = c.forward(c.inputs);
  Tensor<T> r = detail::random_tensor<T>(probe_out.shape(), rng, -1, 1);

  Tape<T> tape;
  {
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = sum_all<T>(mul<T>(c.forward(c.inputs), r));
    tape.backward(loss);
  }

  double worst = 0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    auto f = [&](const Tensor<T>& xi) {
      auto in = c.inputs;
      in[i] = xi;
      return detail::project(c.forward(in), r);
    };
    Tensor<T> fd = finite_diff_grad<T>(f, c.inputs[i], kGradCheckEps<T>);
    Tensor<T> an = c.inputs[i].grad_tensor();
    worst = std::max(worst, relative_error<T>(an.data(), fd.data()));
  }
  return worst;
}

template <class T>
GradCheckResult gradcheck_op(const std::string& op, int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradCheckResult res{op, sizeof(T) == 4 ? "f32" : "f64", trials, 0.0, kGradCheckThreshold<T>};
  for (int t = 0; t < trials; ++t) res.worst_rel_error = std::max(res.worst_rel_error, gradcheck_trial<T>(op, rng));
  return res;
}

/// Runs every op (or just `only`, when non-empty) in both precisions.
inline std::vector<GradCheckResult> run_gradcheck_suite(const std::string& only = "", int trials = 100,
                                                        std::uint64_t seed = 0) {
  std::vector<GradCheckResult> out;
  bool found = only.empty();
  for (const auto& op : differentiable_ops()) {
    if (!only.empty() && op != only) continue;
    found = true;
    out.push_back(gradcheck_op<float>(op, trials, seed));
    out.push_back(gradcheck_op<double>(op, trials, seed));
  }
  if (!found) throw UsageError("gradcheck: unknown op '" + only + "'");
  return out;
}

}  // namespace mixres
