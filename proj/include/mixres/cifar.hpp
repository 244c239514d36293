#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixres/errors.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;  // 3072
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarPixels;                     // 3073
inline constexpr std::size_t kCifarClasses = 10;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

/// One record of the binary distribution: a label byte followed by the
/// red, green and blue planes, each 32x32 row-major.
struct CifarRecord {
  std::uint8_t label = 0;
  std::array<std::uint8_t, kCifarPixels> pixels{};
  bool operator==(const CifarRecord&) const = default;
};

struct DatasetSplit {
  Tensor<float> images;  // [N, 3, 32, 32]
  std::vector<int> labels;
  std::string name;

  std::size_t size() const { return labels.size(); }
};

/// Per-channel statistics of a training split.
struct NormStats {
  std::array<float, 3> mean{};
  std::array<float, 3> std{};
};

// ---------------------------------------------------------------------------
// Binary format

inline std::vector<CifarRecord> parse_cifar10_records(std::span<const std::uint8_t> bytes,
                                                      const std::string& source = "<memory>") {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError(source + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + "-byte records");
  std::vector<CifarRecord> out(bytes.size() / kCifarRecordBytes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] >= kCifarClasses)
      throw FormatError(source + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]) +
                        " (expected 0-9)");
    out[i].label = rec[0];
    std::copy(rec + 1, rec + kCifarRecordBytes, out[i].pixels.begin());
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_cifar10_records(std::span<const CifarRecord> records) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(records.size() * kCifarRecordBytes);
  for (const auto& r : records) {
    bytes.push_back(r.label);
    bytes.insert(bytes.end(), r.pixels.begin(), r.pixels.end());
  }
  return bytes;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<CifarRecord> read_cifar10_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing CIFAR-10 file: " + path.string());
  const auto bytes = read_file_bytes(path);
  return parse_cifar10_records(bytes, path.string());
}

inline void write_cifar10_file(const std::filesystem::path& path, std::span<const CifarRecord> records) {
  write_file_bytes(path, serialize_cifar10_records(records));
}

inline DatasetSplit records_to_split(std::span<const CifarRecord> records, std::string name) {
  if (records.empty()) throw DegenerateDataError("split '" + name + "' has no records");
  DatasetSplit s{Tensor<float>({records.size(), kCifarChannels, kCifarSide, kCifarSide}), {}, std::move(name)};
  s.labels.reserve(records.size());
  auto px = s.images.data();
  for (std::size_t i = 0; i < records.size(); ++i) {
    s.labels.push_back(records[i].label);
    for (std::size_t j = 0; j < kCifarPixels; ++j) px[i * kCifarPixels + j] = records[i].pixels[j] / 255.0f;
  }
  return s;
}

/// Inverse of records_to_split for [0,1]-valued splits (rounds to bytes).
inline std::vector<CifarRecord> split_to_records(const DatasetSplit& s) {
  std::vector<CifarRecord> out(s.size());
  auto px = s.images.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].label = static_cast<std::uint8_t>(s.labels[i]);
    for (std::size_t j = 0; j < kCifarPixels; ++j) {
      const float v = std::clamp(px[i * kCifarPixels + j], 0.0f, 1.0f);
      out[i].pixels[j] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

inline std::vector<std::string> cifar10_train_files() {
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"};
}
inline std::string cifar10_test_file() { return "test_batch.bin"; }

/// Loads data_batch_1..5.bin (train) and test_batch.bin (test) from `dir`.
/// Pixel bytes are scaled to [0, 1].
inline std::pair<DatasetSplit, DatasetSplit> load_cifar10_binary(const std::filesystem::path& dir) {
  std::vector<CifarRecord> train;
  for (const auto& f : cifar10_train_files()) {
    auto recs = read_cifar10_file(dir / f);
    train.insert(train.end(), recs.begin(), recs.end());
  }
  auto test = read_cifar10_file(dir / cifar10_test_file());
  return {records_to_split(train, "train"), records_to_split(test, "test")};
}

/// Writes a directory in the binary layout, spreading `train` over the five
/// batch files. Used for fixtures and synthetic smoke datasets.
inline void write_cifar10_directory(const std::filesystem::path& dir, std::span<const CifarRecord> train,
                                    std::span<const CifarRecord> test) {
  std::filesystem::create_directories(dir);
  const auto files = cifar10_train_files();
  const std::size_t per = (train.size() + files.size() - 1) / files.size();
  for (std::size_t f = 0; f < files.size(); ++f) {
    const std::size_t lo = std::min(train.size(), f * per), hi = std::min(train.size(), lo + per);
    write_cifar10_file(dir / files[f], train.subspan(lo, hi - lo));
  }
  write_cifar10_file(dir / cifar10_test_file(), test);
}

// ---------------------------------------------------------------------------
// Normalization

inline NormStats compute_norm_stats(const DatasetSplit& train) {
  const std::size_t n = train.size(), plane = kCifarSide * kCifarSide;
  NormStats st;
  auto px = train.images.data();
  for (std::size_t c = 0; c < kCifarChannels; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < plane; ++j) s += px[(i * kCifarChannels + c) * plane + j];
    const double mean = s / static_cast<double>(n * plane);
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < plane; ++j) {
        const double d = px[(i * kCifarChannels + c) * plane + j] - mean;
        ss += d * d;
      }
    const double sd = std::sqrt(ss / static_cast<double>(n * plane));
    if (!(sd > 1e-12))
      throw DegenerateDataError("channel " + std::to_string(c) + " of split '" + train.name + "' has zero variance");
    st.mean[c] = static_cast<float>(mean);
    st.std[c] = static_cast<float>(sd);
  }
  return st;
}

namespace detail {
template <class Fn>
DatasetSplit map_channels(const DatasetSplit& split, Fn&& fn) {
  DatasetSplit out{split.images.clone(), split.labels, split.name};
  const std::size_t plane = kCifarSide * kCifarSide;
  auto px = out.images.data();
  for (std::size_t i = 0; i < split.size(); ++i)
    for (std::size_t c = 0; c < kCifarChannels; ++c)
      for (std::size_t j = 0; j < plane; ++j) {
        float& v = px[(i * kCifarChannels + c) * plane + j];
        v = fn(v, c);
      }
  return out;
}
}  // namespace detail

/// (x - mean) / std per channel.
inline DatasetSplit normalize(const DatasetSplit& split, const NormStats& st) {
  for (float s : st.std)
    if (!(s > 0)) throw DegenerateDataError("normalize: std must be positive");
  return detail::map_channels(split, [&](float v, std::size_t c) {
    return static_cast<float>((static_cast<double>(v) - st.mean[c]) / st.std[c]);
  });
}

inline DatasetSplit denormalize(const DatasetSplit& split, const NormStats& st) {
  return detail::map_channels(split, [&](float v, std::size_t c) {
    return static_cast<float>(static_cast<double>(v) * st.std[c] + st.mean[c]);
  });
}

/// First `n` samples of a split (the whole split when n is 0 or too large).
inline DatasetSplit take(const DatasetSplit& split, std::size_t n) {
  if (n == 0 || n >= split.size()) return split;
  DatasetSplit out{Tensor<float>({n, kCifarChannels, kCifarSide, kCifarSide}),
                   std::vector<int>(split.labels.begin(), split.labels.begin() + static_cast<long>(n)), split.name};
  std::copy_n(split.images.data().begin(), n * kCifarPixels, out.images.data().begin());
  return out;
}

/// Samples [begin, end) of a split.
inline DatasetSplit slice(const DatasetSplit& split, std::size_t begin, std::size_t end, std::string name) {
  if (begin >= end || end > split.size()) throw UsageError("slice: bad range");
  DatasetSplit out{Tensor<float>({end - begin, kCifarChannels, kCifarSide, kCifarSide}),
                   std::vector<int>(split.labels.begin() + static_cast<long>(begin),
                                    split.labels.begin() + static_cast<long>(end)),
                   std::move(name)};
  std::copy(split.images.data().begin() + static_cast<long>(begin * kCifarPixels),
            split.images.data().begin() + static_cast<long>(end * kCifarPixels), out.images.data().begin());
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Index partition of one epoch. Shuffled order is a seeded permutation;
/// the final short batch is kept.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool shuffle,
                                                           std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    // Fisher-Yates with an explicit draw so the order is stable across
    // standard library implementations.
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t lo = 0; lo < n; lo += batch_size)
    out.emplace_back(order.begin() + static_cast<long>(lo),
                     order.begin() + static_cast<long>(std::min(n, lo + batch_size)));
  return out;
}

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

inline Batch gather(const DatasetSplit& split, std::span<const std::size_t> indices) {
  const std::size_t per = split.images.numel() / split.size();
  Shape shape = split.images.shape();
  shape[0] = indices.size();
  Batch b{Tensor<float>(shape), {}, {indices.begin(), indices.end()}};
  b.labels.reserve(indices.size());
  auto src = split.images.data();
  auto dst = b.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.begin() + static_cast<long>(indices[i] * per), per, dst.begin() + static_cast<long>(i * per));
    b.labels.push_back(split.labels[indices[i]]);
  }
  return b;
}

/// Sequential iterator over the batches of one epoch.
class BatchIterator {
 public:
  BatchIterator(const DatasetSplit& split, std::size_t batch_size, bool shuffle, std::uint64_t seed)
      : split_(&split), batches_(epoch_batches(split.size(), batch_size, shuffle, seed)) {}

  bool next(Batch& out) {
    if (pos_ >= batches_.size()) return false;
    out = gather(*split_, batches_[pos_++]);
    return true;
  }
  std::size_t num_batches() const { return batches_.size(); }

 private:
  const DatasetSplit* split_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic fixtures

/// Per-class base colors used by synthetic_dataset, deterministic per seed.
inline std::vector<std::array<float, 3>> synthetic_class_colors(std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<float> u(0.15f, 0.85f);
  std::vector<std::array<float, 3>> colors(num_classes);
  for (auto& c : colors) c = {u(rng), u(rng), u(rng)};
  return colors;
}

/// Class-separable images: each class is a constant color plus Gaussian
/// pixel noise of standard deviation `noise`, clamped to [0, 1]. Label of
/// sample i is i mod num_classes.
inline DatasetSplit synthetic_dataset(std::size_t n, std::size_t num_classes, std::uint64_t seed, float noise = 0.1f,
                                      std::string name = "synthetic") {
  if (num_classes < 1 || num_classes > kCifarClasses) throw ConfigError("synthetic_dataset: 1-10 classes supported");
  if (n < num_classes) throw ConfigError("synthetic_dataset: need n >= num_classes");
  const auto colors = synthetic_class_colors(num_classes, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  DatasetSplit s{Tensor<float>({n, kCifarChannels, kCifarSide, kCifarSide}), {}, std::move(name)};
  auto px = s.images.data();
  const std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % num_classes);
    s.labels.push_back(label);
    for (std::size_t c = 0; c < kCifarChannels; ++c)
      for (std::size_t j = 0; j < plane; ++j) {
        const float v = colors[label][c] + (noise > 0 ? noise * gauss(rng) : 0.0f);
        px[(i * kCifarChannels + c) * plane + j] = std::clamp(v, 0.0f, 1.0f);
      }
  }
  return s;
}

}  // namespace mixres
