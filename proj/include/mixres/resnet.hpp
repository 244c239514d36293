#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixres/cifar.hpp"
#include "mixres/errors.hpp"
#include "mixres/ops.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

enum class Stem { Cifar, Imagenet };

inline const char* to_string(Stem s) { return s == Stem::Cifar ? "cifar" : "imagenet"; }

inline Stem parse_stem(const std::string& s) {
  if (s == "cifar") return Stem::Cifar;
  if (s == "imagenet") return Stem::Imagenet;
  throw ConfigError("stem must be 'cifar' or 'imagenet', got '" + s + "'");
}

inline constexpr std::size_t kBottleneckExpansion = 4;

struct ResNetConfig {
  std::array<int, 4> stage_blocks{3, 4, 6, 3};
  int base_width = 64;
  int num_classes = 10;
  Stem stem = Stem::Cifar;
  // Zero-initialize the last conv of every residual branch.
  bool zero_init_residual = false;

  static ResNetConfig resnet50() { return {}; }
  static ResNetConfig tiny() { return {{1, 1, 1, 1}, 16, 10, Stem::Cifar, false}; }

  void validate() const {
    for (int b : stage_blocks)
      if (b < 1) throw ConfigError("every stage needs at least one block");
    if (base_width < 1) throw ConfigError("base_width must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  }

  int total_blocks() const { return stage_blocks[0] + stage_blocks[1] + stage_blocks[2] + stage_blocks[3]; }

  /// Weighted layers on the main path: stem conv, three convs per block, classifier.
  int weighted_depth() const { return 1 + 3 * total_blocks() + 1; }

  /// Whether two configs describe the same parameter layout.
  bool same_architecture(const ResNetConfig& o) const {
    return stage_blocks == o.stage_blocks && base_width == o.base_width && num_classes == o.num_classes &&
           stem == o.stem;
  }
};

template <class T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  BatchNormStats<T> stats;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BatchNorm2d(std::size_t channels = 1)
      : gamma(Shape{channels}, T(1), true), beta(Shape{channels}, T(0), true), stats(channels) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batch_norm2d(x, gamma, beta, stats, mode, eps, momentum);
  }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad_, std::mt19937_64& rng)
      : weight(Shape{out, in, k, k}, T(0), true), stride(stride_), pad(pad_) {
    // He initialization: N(0, 2 / fan_in).
    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    for (auto& v : weight.data()) v = static_cast<T>(d(rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d<T>(x, weight, nullptr, stride, pad, ConvOutput::Floor);
  }
};

/// Full pre-activation bottleneck: [BN -> GELU -> conv] x 3 on the residual
/// branch (1x1 reduce, 3x3 with the block stride, 1x1 expand x4), added to
/// the shortcut with no activation after the sum. The shortcut is the
/// identity when shapes match, otherwise a strided 1x1 projection of x.
template <class T>
struct PreActBottleneck {
  std::size_t in_channels = 0, width = 0, stride = 1;
  BatchNorm2d<T> bn1, bn2, bn3;
  Conv2d<T> conv1, conv2, conv3;
  std::optional<Conv2d<T>> shortcut;

  PreActBottleneck(std::size_t in, std::size_t width_, std::size_t stride_, bool zero_init, std::mt19937_64& rng)
      : in_channels(in),
        width(width_),
        stride(stride_),
        bn1(in),
        bn2(width_),
        bn3(width_),
        conv1(in, width_, 1, 1, 0, rng),
        conv2(width_, width_, 3, stride_, 1, rng),
        conv3(width_, width_ * kBottleneckExpansion, 1, 1, 0, rng) {
    if (stride_ != 1 || in != out_channels()) shortcut.emplace(in, out_channels(), 1, stride_, 0, rng);
    if (zero_init) std::fill(conv3.weight.data().begin(), conv3.weight.data().end(), T(0));
  }

  std::size_t out_channels() const { return width * kBottleneckExpansion; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != in_channels)
      throw DimensionError("bottleneck expects " + std::to_string(in_channels) + " input channels, got shape " +
                           to_string(x.shape()));
    Tensor<T> h = conv1(gelu(bn1(x, mode)));
    h = conv2(gelu(bn2(h, mode)));
    h = conv3(gelu(bn3(h, mode)));
    return add(shortcut ? (*shortcut)(x) : x, h);
  }

  template <class Fn>
  void for_each_parameter(Fn&& fn) {
    for (auto [bn, conv] : {std::pair{&bn1, &conv1}, std::pair{&bn2, &conv2}, std::pair{&bn3, &conv3}}) {
      fn(bn->gamma);
      fn(bn->beta);
      fn(conv->weight);
    }
    if (shortcut) fn(shortcut->weight);
  }

  template <class Fn>
  void for_each_batch_norm(Fn&& fn) {
    fn(bn1);
    fn(bn2);
    fn(bn3);
  }
};

/// Pre-activation bottleneck ResNet for 3x32x32 inputs:
/// stem conv -> 4 stages of bottlenecks -> BN -> GELU -> global average
/// pool -> linear classifier.
template <class T>
class ResNet {
 public:
  ResNet(const ResNetConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto w0 = static_cast<std::size_t>(config_.base_width);
    if (config_.stem == Stem::Cifar)
      stem_ = Conv2d<T>(kCifarChannels, w0, 3, 1, 1, rng);
    else
      stem_ = Conv2d<T>(kCifarChannels, w0, 7, 2, 3, rng);
    std::size_t in = w0;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t width = w0 << s;
      for (int b = 0; b < config_.stage_blocks[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back(in, width, stride, config_.zero_init_residual, rng);
        stage_of_.push_back(s);
        in = blocks_.back().out_channels();
      }
    }
    final_bn_ = BatchNorm2d<T>(in);
    const auto k = static_cast<std::size_t>(config_.num_classes);
    fc_weight_ = Tensor<T>(Shape{k, in}, T(0), true);
    fc_bias_ = Tensor<T>(Shape{k}, T(0), true);
    std::normal_distribution<double> d(0.0, std::sqrt(1.0 / static_cast<double>(in)));
    for (auto& v : fc_weight_.data()) v = static_cast<T>(d(rng));
  }

  const ResNetConfig& config() const { return config_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  PreActBottleneck<T>& block(std::size_t i) { return blocks_.at(i); }
  std::size_t stage_of(std::size_t i) const { return stage_of_.at(i); }

  Tensor<T> forward(const Tensor<T>& images, Mode mode) {
    if (images.rank() != 4 || images.dim(1) != kCifarChannels || images.dim(2) != kCifarSide ||
        images.dim(3) != kCifarSide)
      throw DimensionError("ResNet expects N x 3 x 32 x 32 images, got " + to_string(images.shape()));
    Tensor<T> h = stem_(images);
    for (auto& b : blocks_) h = b.forward(h, mode);
    h = global_avg_pool(gelu(final_bn_(h, mode)));
    return linear(h, fc_weight_, fc_bias_);
  }

  /// Trainable tensors in declaration order (handles share storage).
  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out{stem_.weight};
    for (auto& b : blocks_) b.for_each_parameter([&](Tensor<T>& t) { out.push_back(t); });
    out.push_back(final_bn_.gamma);
    out.push_back(final_bn_.beta);
    out.push_back(fc_weight_);
    out.push_back(fc_bias_);
    return out;
  }

  /// Batch-norm layers in declaration order.
  std::vector<BatchNorm2d<T>*> batch_norms() {
    std::vector<BatchNorm2d<T>*> out;
    for (auto& b : blocks_) b.for_each_batch_norm([&](BatchNorm2d<T>& bn) { out.push_back(&bn); });
    out.push_back(&final_bn_);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

 private:
  ResNetConfig config_;
  Conv2d<T> stem_;
  std::vector<PreActBottleneck<T>> blocks_;
  std::vector<std::size_t> stage_of_;
  BatchNorm2d<T> final_bn_;
  Tensor<T> fc_weight_, fc_bias_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   "MXRS" | u32 version | config | u8 has_norm [6 x f32 norm stats]
//   | u32 tensor count | per tensor: u32 rank, rank x u32 dims, f32 data
// Tensors are the parameters in declaration order followed by every
// batch-norm layer's running mean and running variance.

inline constexpr char kCheckpointMagic[4] = {'M', 'X', 'R', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ResNetConfig config;
  std::optional<NormStats> norm;
  std::vector<Tensor<float>> tensors;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> b, std::string what) : b_(b), what_(std::move(what)) {}
  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    auto p = take(n);
    return std::string(p.begin(), p.end());
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > b_.size()) throw CheckpointError(what_ + ": truncated");
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace detail

template <class T>
std::vector<Tensor<T>> model_state(ResNet<T>& model) {
  auto out = model.parameters();
  for (auto* bn : model.batch_norms()) {
    const auto c = bn->stats.mean.size();
    out.emplace_back(Shape{c}, bn->stats.mean);
    out.emplace_back(Shape{c}, bn->stats.var);
  }
  return out;
}

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(ResNet<T>& model, const std::optional<NormStats>& norm) {
  detail::ByteWriter w;
  for (char c : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  const auto& cfg = model.config();
  for (int b : cfg.stage_blocks) w.u32(static_cast<std::uint32_t>(b));
  w.u32(static_cast<std::uint32_t>(cfg.base_width));
  w.u32(static_cast<std::uint32_t>(cfg.num_classes));
  w.u8(cfg.stem == Stem::Cifar ? 0 : 1);
  w.u8(norm ? 1 : 0);
  if (norm) {
    for (float v : norm->mean) w.f32(v);
    for (float v : norm->std) w.f32(v);
  }
  const auto state = model_state(model);
  w.u32(static_cast<std::uint32_t>(state.size()));
  for (const auto& t : state) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : t.data()) w.f32(static_cast<float>(v));
  }
  return std::move(w.bytes());
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw CheckpointError(what + ": bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(what + ": unsupported format version " + std::to_string(version));
  Checkpoint ck;
  for (auto& b : ck.config.stage_blocks) b = static_cast<int>(r.u32());
  ck.config.base_width = static_cast<int>(r.u32());
  ck.config.num_classes = static_cast<int>(r.u32());
  const auto stem = r.u8();
  if (stem > 1) throw CheckpointError(what + ": bad stem tag");
  ck.config.stem = stem == 0 ? Stem::Cifar : Stem::Imagenet;
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(what + ": invalid config: " + e.what());
  }
  if (r.u8()) {
    NormStats n;
    for (auto& v : n.mean) v = r.f32();
    for (auto& v : n.std) v = r.f32();
    ck.norm = n;
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw CheckpointError(what + ": bad tensor rank");
    Shape s(rank);
    for (auto& d : s) {
      d = r.u32();
      if (d == 0) throw CheckpointError(what + ": zero tensor dimension");
    }
    const std::size_t n = numel_of(s);
    if (n * 4 > r.remaining()) throw CheckpointError(what + ": truncated tensor data");
    std::vector<float> v(n);
    for (auto& x : v) x = r.f32();
    ck.tensors.emplace_back(std::move(s), std::move(v));
  }
  if (r.remaining() != 0) throw CheckpointError(what + ": trailing bytes");
  return ck;
}

/// Copies checkpoint tensors into `model`; rejects architecture mismatches.
template <class T>
void restore_checkpoint(ResNet<T>& model, const Checkpoint& ck) {
  if (!model.config().same_architecture(ck.config))
    throw CheckpointError("checkpoint config does not match the model configuration");
  auto state = model_state(model);
  if (state.size() != ck.tensors.size()) throw CheckpointError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < state.size(); ++i)
    if (state[i].shape() != ck.tensors[i].shape())
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " has shape " +
                            to_string(ck.tensors[i].shape()) + ", expected " + to_string(state[i].shape()));
  auto params = model.parameters();
  std::size_t i = 0;
  for (auto& p : params) {
    auto src = ck.tensors[i++].data();
    std::transform(src.begin(), src.end(), p.data().begin(), [](float v) { return static_cast<T>(v); });
  }
  for (auto* bn : model.batch_norms()) {
    auto m = ck.tensors[i++].data();
    auto v = ck.tensors[i++].data();
    std::transform(m.begin(), m.end(), bn->stats.mean.begin(), [](float x) { return static_cast<T>(x); });
    std::transform(v.begin(), v.end(), bn->stats.var.begin(), [](float x) { return static_cast<T>(x); });
  }
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, ResNet<T>& model, const std::optional<NormStats>& norm) {
  const auto bytes = serialize_checkpoint(model, norm);
  write_file_bytes(path, bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  return parse_checkpoint(bytes, path.string());
}

}  // namespace mixres
