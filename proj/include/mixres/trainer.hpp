#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixres/augment.hpp"
#include "mixres/cifar.hpp"
#include "mixres/errors.hpp"
#include "mixres/losses.hpp"
#include "mixres/optim.hpp"
#include "mixres/resnet.hpp"

namespace mixres {

using Json = nlohmann::ordered_json;

/// One training run's hyperparameters. Defaults are the reference recipe:
/// SGD at lr 0.05, batch 128, cosine annealing over 200 epochs.
struct TrainConfig {
  double lr = 0.05;
  int batch_size = 128;
  int epochs = 200;
  int t_max = 200;
  double eta_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  MixupConfig mixup{};
  std::uint64_t seed = 0;
  Reduction loss_reduction = Reduction::Mean;
  int eval_every = 1;
  bool augment = true;  // random crop + horizontal flip
  int crop_pad = 4;
  double flip_p = 0.5;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (t_max < 1) throw ConfigError("t_max must be >= 1");
    if (epochs > t_max + 1) throw ConfigError("epochs must not exceed t_max + 1 (cosine schedule range)");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (crop_pad < 0) throw ConfigError("crop_pad must be >= 0");
    if (!(flip_p >= 0 && flip_p <= 1)) throw ConfigError("flip_p must lie in [0, 1]");
    sgd().validate();
    schedule().validate();
    mixup.validate();
  }

  SgdConfig sgd() const { return {lr, momentum, weight_decay}; }
  CosineSchedule schedule() const { return {lr, eta_min, t_max}; }
};

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["t_max"] = c.t_max;
  j["eta_min"] = c.eta_min;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["mixup"] = c.mixup.enabled;
  j["mixup_alpha"] = c.mixup.alpha;
  j["seed"] = c.seed;
  j["loss_reduction"] = to_string(c.loss_reduction);
  j["eval_every"] = c.eval_every;
  j["augment"] = c.augment;
  j["crop_pad"] = c.crop_pad;
  j["flip_p"] = c.flip_p;
  return j;
}

inline Json to_json(const ResNetConfig& c) {
  Json j;
  j["stage_blocks"] = c.stage_blocks;
  j["base_width"] = c.base_width;
  j["num_classes"] = c.num_classes;
  j["stem"] = to_string(c.stem);
  j["zero_init_residual"] = c.zero_init_residual;
  return j;
}

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;       // the optimized objective (mixup loss when enabled)
  double train_hard_loss = 0;  // same logits scored against the unmixed labels
  double train_accuracy = 0;
  std::optional<double> test_loss;
  std::optional<double> test_error_pct;
  double lr = 0;
  double wall_seconds = 0;  // not part of the JSONL record
};

inline Json to_json(const EpochMetrics& m) {
  Json j;
  j["type"] = "epoch";
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["train_hard_loss"] = m.train_hard_loss;
  j["train_accuracy"] = m.train_accuracy;
  j["test_loss"] = m.test_loss ? Json(*m.test_loss) : Json(nullptr);
  j["test_error_pct"] = m.test_error_pct ? Json(*m.test_error_pct) : Json(nullptr);
  j["lr"] = m.lr;
  return j;
}

inline EpochMetrics epoch_metrics_from_json(const Json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.train_loss = j.at("train_loss").get<double>();
  m.train_hard_loss = j.at("train_hard_loss").get<double>();
  m.train_accuracy = j.at("train_accuracy").get<double>();
  if (!j.at("test_loss").is_null()) m.test_loss = j.at("test_loss").get<double>();
  if (!j.at("test_error_pct").is_null()) m.test_error_pct = j.at("test_error_pct").get<double>();
  m.lr = j.at("lr").get<double>();
  return m;
}

struct RunSummary {
  std::optional<double> best_error_pct;
  int best_epoch = 0;
  std::optional<double> final_test_loss;
  std::optional<double> final_error_pct;
  double final_train_loss = 0;
};

struct RunLog {
  Json config;
  std::vector<EpochMetrics> epochs;
  RunSummary summary;
};

inline Json to_json(const RunSummary& s) {
  Json j;
  j["type"] = "summary";
  j["best_error_pct"] = s.best_error_pct ? Json(*s.best_error_pct) : Json(nullptr);
  j["best_epoch"] = s.best_epoch;
  j["final_test_loss"] = s.final_test_loss ? Json(*s.final_test_loss) : Json(nullptr);
  j["final_error_pct"] = s.final_error_pct ? Json(*s.final_error_pct) : Json(nullptr);
  j["final_train_loss"] = s.final_train_loss;
  return j;
}

/// JSON-lines rendering: config line, one line per epoch, summary line.
inline std::string runlog_jsonl(const RunLog& log, bool with_summary = true) {
  std::string out = log.config.dump() + "\n";
  for (const auto& m : log.epochs) out += to_json(m).dump() + "\n";
  if (with_summary) out += to_json(log.summary).dump() + "\n";
  return out;
}

inline std::string summary_csv_header() { return "epoch,train_loss,test_loss,test_error_pct,lr\n"; }

inline std::string summary_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os.precision(10);
  os << m.epoch << ',' << m.train_loss << ',';
  if (m.test_loss) os << *m.test_loss;
  os << ',';
  if (m.test_error_pct) os << *m.test_error_pct;
  os << ',' << m.lr << '\n';
  return os.str();
}

inline std::string summary_csv(const RunLog& log) {
  std::string s = summary_csv_header();
  for (const auto& m : log.epochs) s += summary_csv_row(m);
  return s;
}

/// Normalized train/test splits plus the train-split statistics used.
struct TrainingData {
  DatasetSplit train;
  DatasetSplit test;
  NormStats norm;
};

inline TrainingData prepare_data(const DatasetSplit& train_raw, const DatasetSplit& test_raw) {
  const NormStats st = compute_norm_stats(train_raw);
  return {normalize(train_raw, st), normalize(test_raw, st), st};
}

struct EpochTrainStats {
  double loss = 0;
  double hard_loss = 0;
  double accuracy = 0;
};

struct EvalResult {
  double loss = 0;
  double error_pct = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Index of the largest entry of each row; ties go to the lowest index.
template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = best;
  }
  return out;
}

// Stream ids for derive_seed.
enum class Stream : std::uint64_t { Shuffle = 1, Augment = 2, Mixup = 3, Init = 4 };

/// One epoch of training: per batch crop/flip -> mixup -> forward ->
/// mixup loss -> backward -> SGD step. `epoch` is 1-based and selects the
/// random streams, so any epoch can be replayed independently of history.
template <class T>
EpochTrainStats train_epoch(ResNet<T>& model, const DatasetSplit& train, const TrainConfig& config, int epoch,
                            Sgd<T>& optimizer) {
  const auto K = static_cast<std::size_t>(model.config().num_classes);
  const auto batches = epoch_batches(train.size(), static_cast<std::size_t>(config.batch_size), true,
                                     derive_seed(config.seed, {static_cast<std::uint64_t>(Stream::Shuffle),
                                                               static_cast<std::uint64_t>(epoch)}));
  double loss_sum = 0, hard_sum = 0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    Batch batch = gather(train, batches[b]);
    Tensor<T> images = batch.images;
    Rng aug_rng(derive_seed(config.seed, {static_cast<std::uint64_t>(Stream::Augment),
                                          static_cast<std::uint64_t>(epoch), b}));
    Rng mix_rng(derive_seed(config.seed, {static_cast<std::uint64_t>(Stream::Mixup),
                                          static_cast<std::uint64_t>(epoch), b}));
    if (config.augment) {
      images = random_crop(images, static_cast<std::size_t>(config.crop_pad), aug_rng);
      images = horizontal_flip(images, config.flip_p, aug_rng);
    }
    Tensor<T> targets = one_hot<T>(batch.labels, K);
    if (config.mixup.enabled) {
      auto draw = mixup(images, targets, config.mixup, mix_rng);
      images = draw.mixed_inputs;
      targets = draw.mixed_targets;
    }

    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> logits = model.forward(images, Mode::Train);
    for (T v : logits.data())
      if (!std::isfinite(static_cast<double>(v)))
        throw TrainingDiverged("non-finite logits at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b) + ", lr " + std::to_string(optimizer.lr()));
    Tensor<T> log_probs = log_softmax_clamped(logits);
    LossValue<T> loss = cross_entropy(targets, log_probs, config.loss_reduction);
    double batch_loss = 0;
    for (double v : loss.per_sample) batch_loss += v;
    if (!std::isfinite(batch_loss) || !std::isfinite(static_cast<double>(loss.total.item())))
      throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                             ", lr " + std::to_string(optimizer.lr()));
    model.zero_grad();
    tape.backward(loss.total);
    optimizer.step();

    loss_sum += batch_loss;
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      hard_sum -= log_probs[i * K + static_cast<std::size_t>(batch.labels[i])];
      correct += pred[i] == static_cast<std::size_t>(batch.labels[i]);
    }
    seen += batch.labels.size();
  }
  const double n = static_cast<double>(seen);
  return {loss_sum / n, hard_sum / n, static_cast<double>(correct) / n};
}

/// Eval-mode pass with no augmentation: mean cross-entropy against one-hot
/// labels (clamped log-softmax) and top-1 error in percent.
template <class T>
EvalResult evaluate(ResNet<T>& model, const DatasetSplit& split, std::size_t batch_size = 256) {
  if (split.size() == 0) throw DegenerateDataError("evaluate: empty split");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const auto K = static_cast<std::size_t>(model.config().num_classes);
  EvalResult r;
  double loss_sum = 0;
  BatchIterator it(split, batch_size, false, 0);
  Batch batch;
  while (it.next(batch)) {
    Tensor<T> logits = model.forward(batch.images, Mode::Eval);
    Tensor<T> log_probs = log_softmax_clamped(logits);
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      const auto y = static_cast<std::size_t>(batch.labels[i]);
      loss_sum -= log_probs[i * K + y];
      r.correct += pred[i] == y;
    }
    r.total += batch.labels.size();
  }
  r.loss = loss_sum / static_cast<double>(r.total);
  r.error_pct = 100.0 * (1.0 - static_cast<double>(r.correct) / static_cast<double>(r.total));
  return r;
}

/// Model + optimizer + progress of one run; the unit that fit() and the
/// sweep advance epoch by epoch and that checkpoints capture.
class TrainingRun {
 public:
  TrainingRun(TrainConfig config, ResNetConfig model_config)
      : config_(std::move(config)),
        model_(std::make_unique<ResNet<float>>(
            model_config, derive_seed(config_.seed, {static_cast<std::uint64_t>(Stream::Init)}))),
        optimizer_(model_->parameters(), config_.sgd()) {
    config_.validate();
  }

  const TrainConfig& config() const { return config_; }
  ResNet<float>& model() { return *model_; }
  Sgd<float>& optimizer() { return optimizer_; }
  int epochs_done() const { return epochs_done_; }

  /// Trains the next epoch at lr = cosine_lr(epoch - 1).
  EpochTrainStats run_epoch(const DatasetSplit& train, double* lr_out = nullptr) {
    const int epoch = epochs_done_ + 1;
    const double lr = cosine_lr(config_.schedule(), epoch - 1);
    optimizer_.set_lr(lr);
    auto stats = train_epoch(*model_, train, config_, epoch, optimizer_);
    epochs_done_ = epoch;
    if (lr_out) *lr_out = lr;
    return stats;
  }

  /// Model checkpoint plus optimizer velocity and epoch counter.
  std::vector<std::uint8_t> serialize_state(const std::optional<NormStats>& norm, const std::string& extra) {
    detail::ByteWriter w;
    for (char c : {'M', 'X', 'T', 'S'}) w.u8(static_cast<std::uint8_t>(c));
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(epochs_done_));
    auto ck = serialize_checkpoint(*model_, norm);
    w.u64(ck.size());
    w.raw(ck);
    const auto& vel = optimizer_.velocity();
    w.u32(static_cast<std::uint32_t>(vel.size()));
    for (const auto& v : vel) {
      w.u64(v.size());
      for (float x : v) w.f32(x);
    }
    w.str(extra);
    return std::move(w.bytes());
  }

  /// Restores a state written by serialize_state; returns its `extra` string.
  std::string restore_state(std::span<const std::uint8_t> bytes, const std::string& what) {
    detail::ByteReader r(bytes, what);
    auto magic = r.take(4);
    if (std::string(magic.begin(), magic.end()) != "MXTS") throw CheckpointError(what + ": bad magic");
    if (r.u32() != 1) throw CheckpointError(what + ": unsupported version");
    const int epochs = static_cast<int>(r.u32());
    const auto ck_size = r.u64();
    restore_checkpoint(*model_, parse_checkpoint(r.take(ck_size), what));
    auto& vel = optimizer_.velocity();
    if (r.u32() != vel.size()) throw CheckpointError(what + ": optimizer state mismatch");
    for (auto& v : vel) {
      if (r.u64() != v.size()) throw CheckpointError(what + ": optimizer state mismatch");
      for (auto& x : v) x = r.f32();
    }
    epochs_done_ = epochs;
    return r.str();
  }

 private:
  TrainConfig config_;
  std::unique_ptr<ResNet<float>> model_;
  Sgd<float> optimizer_;
  int epochs_done_ = 0;
};

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;  // RunLog, CSVs, checkpoints
  bool resume = false;                           // continue from out_dir/last.state
  Json extra_config;                             // merged into the config line
  std::function<void(const EpochMetrics&)> on_epoch;
  std::size_t eval_batch_size = 256;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

inline void append_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

inline void update_summary(RunLog& log) {
  RunSummary s;
  for (const auto& m : log.epochs) {
    if (m.test_error_pct && (!s.best_error_pct || *m.test_error_pct < *s.best_error_pct)) {
      s.best_error_pct = m.test_error_pct;
      s.best_epoch = m.epoch;
    }
    if (m.test_loss) {
      s.final_test_loss = m.test_loss;
      s.final_error_pct = m.test_error_pct;
    }
  }
  if (!log.epochs.empty()) s.final_train_loss = log.epochs.back().train_loss;
  log.summary = s;
}

}  // namespace detail

/// Trains for config.epochs epochs with a per-epoch cosine learning rate,
/// evaluating every eval_every epochs (and at the last one). With an output
/// directory it writes runlog.jsonl, summary.csv, timings.csv, best.ckpt
/// (lowest test error so far) and last.state (resumable) as it goes.
inline RunLog fit(const TrainConfig& config, const ResNetConfig& model_config, const TrainingData& data,
                  const FitOptions& options = {}) {
  config.validate();
  TrainingRun run(config, model_config);
  RunLog log;
  log.config["type"] = "config";
  log.config["train"] = to_json(config);
  log.config["model"] = to_json(model_config);
  log.config["data"] = {{"train_size", data.train.size()}, {"test_size", data.test.size()}};
  for (auto it = options.extra_config.begin(); it != options.extra_config.end(); ++it)
    log.config[it.key()] = it.value();

  namespace fs = std::filesystem;
  const auto& dir = options.out_dir;
  if (dir) fs::create_directories(*dir);

  if (options.resume && dir && fs::exists(*dir / "last.state")) {
    const auto bytes = read_file_bytes(*dir / "last.state");
    const std::string extra = run.restore_state(bytes, (*dir / "last.state").string());
    const Json saved = Json::parse(extra);
    if (saved.at("config") != log.config)
      throw CheckpointError("resume: saved run has a different configuration");
    for (const auto& e : saved.at("epochs")) log.epochs.push_back(epoch_metrics_from_json(e));
    if (static_cast<int>(log.epochs.size()) != run.epochs_done())
      throw CheckpointError("resume: epoch log does not match checkpoint");
  }
  detail::update_summary(log);

  if (dir) {
    detail::write_text(*dir / "runlog.jsonl", runlog_jsonl(log, false));
    detail::write_text(*dir / "summary.csv", summary_csv(log));
    if (log.epochs.empty()) detail::write_text(*dir / "timings.csv", "epoch,wall_seconds\n");
  }

  while (run.epochs_done() < config.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    const auto stats = run.run_epoch(data.train, &m.lr);
    m.epoch = run.epochs_done();
    m.train_loss = stats.loss;
    m.train_hard_loss = stats.hard_loss;
    m.train_accuracy = stats.accuracy;
    const bool do_eval = m.epoch % config.eval_every == 0 || m.epoch == config.epochs;
    bool improved = false;
    if (do_eval) {
      const auto ev = evaluate(run.model(), data.test, options.eval_batch_size);
      m.test_loss = ev.loss;
      m.test_error_pct = ev.error_pct;
      improved = !log.summary.best_error_pct || ev.error_pct < *log.summary.best_error_pct;
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(m);
    detail::update_summary(log);

    if (dir) {
      detail::append_text(*dir / "runlog.jsonl", to_json(m).dump() + "\n");
      detail::append_text(*dir / "summary.csv", summary_csv_row(m));
      std::ostringstream t;
      t << m.epoch << ',' << m.wall_seconds << '\n';
      detail::append_text(*dir / "timings.csv", t.str());
      if (improved) save_checkpoint(*dir / "best.ckpt", run.model(), data.norm);
      Json saved;
      saved["config"] = log.config;
      saved["epochs"] = Json::array();
      for (const auto& e : log.epochs) saved["epochs"].push_back(to_json(e));
      write_file_bytes(*dir / "last.state.tmp", run.serialize_state(data.norm, saved.dump()));
      fs::rename(*dir / "last.state.tmp", *dir / "last.state");
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  if (dir) {
    detail::write_text(*dir / "runlog.jsonl", runlog_jsonl(log, true));
    save_checkpoint(*dir / "final.ckpt", run.model(), data.norm);
  }
  return log;
}

struct MixupComparison {
  RunLog with_mixup;
  RunLog without_mixup;
  double test_loss_ratio = 0;   // test loss without mixup / with mixup
  double train_loss_delta = 0;  // train loss with mixup - without
  double test_error_delta = 0;  // test error with mixup - without (points)
};

inline Json to_json(const MixupComparison& c) {
  Json j;
  j["test_loss_ratio"] = c.test_loss_ratio;
  j["train_loss_delta"] = c.train_loss_delta;
  j["test_error_delta"] = c.test_error_delta;
  j["with_mixup"] = to_json(c.with_mixup.summary);
  j["without_mixup"] = to_json(c.without_mixup.summary);
  return j;
}

/// Runs `a` (nominally with mixup) and `b` (nominally without) and reports
/// final-epoch ratios and deltas.
inline MixupComparison compare_runs(const TrainConfig& a, const TrainConfig& b, const ResNetConfig& model_config,
                                    const TrainingData& data, const std::optional<std::filesystem::path>& out_dir = {},
                                    std::function<void(const char*, const EpochMetrics&)> on_epoch = {}) {
  FitOptions oa, ob;
  if (out_dir) {
    oa.out_dir = *out_dir / "with_mixup";
    ob.out_dir = *out_dir / "without_mixup";
  }
  if (on_epoch) {
    oa.on_epoch = [&](const EpochMetrics& m) { on_epoch("mixup", m); };
    ob.on_epoch = [&](const EpochMetrics& m) { on_epoch("no-mixup", m); };
  }
  MixupComparison c{fit(a, model_config, data, oa), fit(b, model_config, data, ob)};
  const auto& sa = c.with_mixup.summary;
  const auto& sb = c.without_mixup.summary;
  c.test_loss_ratio = *sb.final_test_loss / *sa.final_test_loss;
  c.train_loss_delta = sa.final_train_loss - sb.final_train_loss;
  c.test_error_delta = *sa.final_error_pct - *sb.final_error_pct;
  return c;
}

/// Same config and seed, trained once with and once without mixup.
inline MixupComparison compare_mixup(const TrainConfig& config, const ResNetConfig& model_config,
                                     const TrainingData& data,
                                     const std::optional<std::filesystem::path>& out_dir = {},
                                     std::function<void(const char*, const EpochMetrics&)> on_epoch = {}) {
  TrainConfig with = config, without = config;
  with.mixup.enabled = true;
  without.mixup.enabled = false;
  return compare_runs(with, without, model_config, data, out_dir, std::move(on_epoch));
}

}  // namespace mixres
