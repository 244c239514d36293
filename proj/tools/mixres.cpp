// mixres command-line entry point: train, eval, sweep, compare-mixup,
// mixup-preview, gradcheck and synth-data.
//
// Exit codes: 0 success, 1 check failure, 2 usage/config, 3 data,
// 4 checkpoint.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mixres/mixres.hpp"

using namespace mixres;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kData = 3, kCheckpoint = 4 };

struct DataFlags {
  std::string dir;
  std::size_t subset = 0;       // 0 = all
  std::size_t test_subset = 0;  // 0 = all
};

struct ModelFlags {
  std::string arch;
  int width = 0;  // 0 = architecture default
  std::string stage_blocks;  // "3,4,6,3"; empty = architecture default
  std::string stem = "cifar";
  bool zero_init_residual = false;

  ResNetConfig resolve() const {
    ResNetConfig c;
    if (arch == "resnet50")
      c = ResNetConfig::resnet50();
    else if (arch == "tiny")
      c = ResNetConfig::tiny();
    else
      throw ConfigError("--arch: unknown architecture '" + arch + "' (expected resnet50 or tiny)");
    if (width > 0) c.base_width = width;
    if (!stage_blocks.empty()) {
      std::vector<int> v;
      std::string tok;
      std::istringstream is(stage_blocks);
      while (std::getline(is, tok, ',')) {
        try {
          v.push_back(std::stoi(tok));
        } catch (const std::exception&) {
          throw ConfigError("--stage-blocks: '" + stage_blocks + "' is not a list of integers");
        }
      }
      if (v.size() != 4) throw ConfigError("--stage-blocks: expected 4 comma-separated values");
      std::copy(v.begin(), v.end(), c.stage_blocks.begin());
    }
    c.stem = parse_stem(stem);
    c.zero_init_residual = zero_init_residual;
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  bool no_mixup = false;
  bool no_augment = false;
  std::string reduction = "mean";

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.mixup.enabled = !no_mixup;
    c.augment = !no_augment;
    c.loss_reduction = parse_reduction(reduction);
    c.validate();
    return c;
  }
};

void add_data_flags(CLI::App* sub, DataFlags& d) {
  sub->add_option("--data-dir", d.dir, "CIFAR-10 binary directory (data_batch_*.bin, test_batch.bin)")
      ->envname("MIXRES_DATA_DIR");
  sub->add_option("--subset", d.subset, "Use the first N training images (0 = all)")->capture_default_str();
  sub->add_option("--test-subset", d.test_subset, "Use the first N test images (0 = all)")->capture_default_str();
}

void add_model_flags(CLI::App* sub, ModelFlags& m, const std::string& default_arch) {
  m.arch = default_arch;
  sub->add_option("--arch", m.arch, "resnet50 | tiny")->capture_default_str();
  sub->add_option("--width", m.width, "Stem width (0 = architecture default)")->capture_default_str();
  sub->add_option("--stage-blocks", m.stage_blocks, "Bottlenecks per stage, e.g. 3,4,6,3 (empty = architecture default)");
  sub->add_option("--stem", m.stem, "cifar (3x3) | imagenet (7x7 stride 2)")->capture_default_str();
  sub->add_flag("--zero-init-residual", m.zero_init_residual, "Zero the last conv of every residual branch");
}

void add_train_flags(CLI::App* sub, TrainFlags& t) {
  auto& c = t.cfg;
  sub->add_option("--lr", c.lr, "Peak learning rate")->capture_default_str();
  sub->add_option("--batch-size", c.batch_size, "Mini-batch size")->capture_default_str();
  sub->add_option("--epochs", c.epochs, "Epochs to train")->capture_default_str();
  sub->add_option("--t-max", c.t_max, "Cosine annealing period in epochs")->capture_default_str();
  sub->add_option("--eta-min", c.eta_min, "Final learning rate of the cosine schedule")->capture_default_str();
  sub->add_option("--momentum", c.momentum, "SGD momentum")->capture_default_str();
  sub->add_option("--weight-decay", c.weight_decay, "L2 weight decay")->capture_default_str();
  sub->add_flag("--no-mixup", t.no_mixup, "Train on unmixed batches");
  sub->add_option("--mixup-alpha", c.mixup.alpha, "Beta(alpha, alpha) shape for lambda")->capture_default_str();
  sub->add_flag("--no-augment", t.no_augment, "Disable random crop and horizontal flip");
  sub->add_option("--crop-pad", c.crop_pad, "Zero padding for the random crop")->capture_default_str();
  sub->add_option("--flip-p", c.flip_p, "Horizontal flip probability")->capture_default_str();
  sub->add_option("--loss-reduction", t.reduction, "mean | sum")->capture_default_str();
  sub->add_option("--eval-every", c.eval_every, "Evaluate every N epochs (and at the last)")->capture_default_str();
  sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
}

std::string section(const CLI::App* sub) { return "[" + sub->get_name() + "]\n" + sub->config_to_str(true, true); }

void write_effective_config(const fs::path& dir, const CLI::App* sub) {
  fs::create_directories(dir);
  detail::write_text(dir / "effective_config.ini", section(sub));
}

std::pair<DatasetSplit, DatasetSplit> load_data(const DataFlags& d) {
  if (d.dir.empty()) throw IoError("no data directory: pass --data-dir or set MIXRES_DATA_DIR");
  auto [train, test] = load_cifar10_binary(d.dir);
  return {take(train, d.subset), take(test, d.test_subset)};
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void print_epoch(const char* tag, const EpochMetrics& m, int epochs) {
  std::cout << (tag ? std::string(tag) + " " : "") << "epoch " << m.epoch << "/" << epochs
            << "  train_loss " << fixed(m.train_loss, 4) << "  train_acc " << fixed(100 * m.train_accuracy, 2) << "%";
  if (m.test_loss) std::cout << "  test_loss " << fixed(*m.test_loss, 4) << "  test_error " << fixed(*m.test_error_pct, 2) << "%";
  std::cout << "  lr " << m.lr << "  (" << fixed(m.wall_seconds, 1) << "s)" << std::endl;
}

// ---------------------------------------------------------------------------

int cmd_train(CLI::App* sub, const TrainFlags& tf, const ModelFlags& mf, const DataFlags& df, const std::string& out,
              bool resume, bool dry_run) {
  const TrainConfig cfg = tf.resolve();
  const ResNetConfig model = mf.resolve();
  std::cout << "effective configuration:\n" << section(sub) << std::flush;
  if (dry_run) return kOk;
  auto [train_raw, test_raw] = load_data(df);
  const TrainingData data = prepare_data(train_raw, test_raw);
  write_effective_config(out, sub);
  FitOptions opt;
  opt.out_dir = fs::path(out);
  opt.resume = resume;
  opt.on_epoch = [&](const EpochMetrics& m) { print_epoch(nullptr, m, cfg.epochs); };
  const RunLog log = fit(cfg, model, data, opt);
  if (log.summary.final_error_pct)
    std::cout << "final test error " << fixed(*log.summary.final_error_pct, 2) << "% (best "
              << fixed(*log.summary.best_error_pct, 2) << "% at epoch " << log.summary.best_epoch << ")\n";
  std::cout << "outputs in " << out << "\n";
  return kOk;
}

int cmd_eval(CLI::App* sub, const DataFlags& df, const std::string& checkpoint, const std::string& expect_arch,
             std::size_t batch_size, bool json, const std::string& out) {
  if (batch_size < 1) throw ConfigError("--batch-size must be >= 1");
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (!expect_arch.empty()) {
    ModelFlags mf;
    mf.arch = expect_arch;
    const ResNetConfig want = mf.resolve();
    if (want.stage_blocks != ck.config.stage_blocks || want.base_width != ck.config.base_width)
      throw CheckpointError(checkpoint + ": checkpoint architecture does not match --arch " + expect_arch);
  }
  auto [train_raw, test_raw] = load_data(df);
  const NormStats norm = ck.norm ? *ck.norm : compute_norm_stats(train_raw);
  const DatasetSplit test = normalize(test_raw, norm);
  ResNet<float> model(ck.config, 0);
  restore_checkpoint(model, ck);
  const EvalResult r = evaluate(model, test, batch_size);
  if (!out.empty()) write_effective_config(out, sub);
  if (json) {
    Json j;
    j["checkpoint"] = checkpoint;
    j["test_loss"] = r.loss;
    j["error_pct"] = r.error_pct;
    j["accuracy"] = 1.0 - r.error_pct / 100.0;
    j["correct"] = r.correct;
    j["total"] = r.total;
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "test_loss " << fixed(r.loss, 6) << "\nerror_pct " << fixed(r.error_pct, 2) << "\n";
  }
  return kOk;
}

int cmd_sweep(CLI::App* sub, const std::string& spec_path, const ModelFlags& mf, const DataFlags& df,
              const std::string& out, int jobs, bool on_test, std::optional<std::uint64_t> seed, bool no_augment) {
  SweepSpec spec = spec_path.empty() ? SweepSpec{} : load_sweep_spec(spec_path);
  if (on_test) spec.on_test = true;
  if (seed) spec.seed = *seed;
  spec.validate();
  check_tunable(spec.space);
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  const ResNetConfig model = mf.resolve();

  const auto plan = hyperband_schedule(spec.R, spec.eta);
  std::cout << "hyperband R=" << spec.R << " eta=" << spec.eta << " (total budget " << total_budget(plan)
            << " epochs)\n";
  for (const auto& b : plan) {
    std::cout << "  bracket s=" << b.s << ":";
    for (std::size_t i = 0; i < b.rungs.size(); ++i)
      std::cout << (i ? " ->" : "") << " (" << b.rungs[i].n_configs << ", " << b.rungs[i].resource << ")";
    std::cout << "\n";
  }
  std::cout << std::flush;

  auto [train_raw, test_raw] = load_data(df);
  const TrainingData data = sweep_data(train_raw, test_raw, spec);
  fs::create_directories(out);
  write_effective_config(out, sub);
  detail::write_text(fs::path(out) / "sweep_spec.ini", to_ini(spec));

  TrainConfig base;
  base.augment = !no_augment;
  TrainingObjective objective(base, model, data, spec.R, fs::path(out) / "trials");
  HyperbandOptions opt;
  opt.seed = spec.seed;
  opt.jobs = jobs;
  std::mutex print_mu;
  opt.on_evaluation = [&](const Evaluation& e) {
    std::lock_guard lock(print_mu);
    std::cout << "bracket " << e.bracket << " rung " << e.rung << " trial " << e.trial << " resource " << e.resource
              << " accuracy " << (std::isfinite(e.metric) ? fixed(e.metric, 4) : std::string("failed")) << std::endl;
  };
  opt.on_trial_finished = [&](const Trial& t) { objective.release(t.id); };
  const auto result = hyperband(
      spec.space, spec.R, spec.eta, [&](const Trial& t, double r) { return objective(t, r); }, opt);
  sweep_report(spec.space, result, spec.R, spec.eta, out);

  if (!result.best) {
    std::cerr << "sweep: every trial failed\n";
    return kCheckFailed;
  }
  const Trial& best = result.best_trial();
  Json j;
  j["trial"] = best.id;
  j["bracket"] = best.bracket;
  j["metric"] = best.metric;
  j["resource"] = best.resource;
  for (const auto& v : best.config.values) j["config"][v.name] = v.label;
  detail::write_text(fs::path(out) / "best.json", j.dump(2) + "\n");
  std::cout << "best trial " << best.id << " (bracket " << best.bracket << "): accuracy " << fixed(best.metric, 4);
  for (const auto& v : best.config.values) std::cout << "  " << v.name << "=" << v.label;
  std::cout << "\nreports in " << out << "\n";
  return kOk;
}

int cmd_compare(CLI::App* sub, const TrainFlags& tf, const ModelFlags& mf, const DataFlags& df,
                const std::string& out) {
  const TrainConfig cfg = tf.resolve();
  const ResNetConfig model = mf.resolve();
  auto [train_raw, test_raw] = load_data(df);
  const TrainingData data = prepare_data(train_raw, test_raw);
  write_effective_config(out, sub);
  const auto c = compare_mixup(cfg, model, data, fs::path(out),
                               [&](const char* tag, const EpochMetrics& m) { print_epoch(tag, m, cfg.epochs); });
  detail::write_text(fs::path(out) / "comparison.json", to_json(c).dump(2) + "\n");
  std::cout << "test loss ratio (no mixup / mixup) " << fixed(c.test_loss_ratio, 4) << "\n"
            << "train loss delta (mixup - no mixup) " << fixed(c.train_loss_delta, 4) << "\n"
            << "test error delta (mixup - no mixup) " << fixed(c.test_error_delta, 2) << " points\n";
  return kOk;
}

std::string ppm(const std::array<std::uint8_t, kCifarPixels>& chw) {
  std::string s = "P6\n32 32\n255\n";
  const std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < kCifarChannels; ++c) s += static_cast<char>(chw[c * plane + p]);
  return s;
}

int cmd_preview(CLI::App* sub, const DataFlags& df, const std::string& split, std::size_t a, std::size_t b,
                double lambda, const std::string& out) {
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("--lambda must lie in [0, 1]");
  if (split != "train" && split != "test") throw ConfigError("--split must be train or test");
  if (df.dir.empty()) throw IoError("no data directory: pass --data-dir or set MIXRES_DATA_DIR");
  std::vector<CifarRecord> recs;
  if (split == "train") {
    for (const auto& f : cifar10_train_files()) {
      auto part = read_cifar10_file(fs::path(df.dir) / f);
      recs.insert(recs.end(), part.begin(), part.end());
    }
  } else {
    recs = read_cifar10_file(fs::path(df.dir) / cifar10_test_file());
  }
  for (std::size_t idx : {a, b})
    if (idx >= recs.size())
      throw DegenerateDataError("image index " + std::to_string(idx) + " out of range for the " + split +
                                " split of " + std::to_string(recs.size()) + " images");
  CifarRecord mixed;
  for (std::size_t i = 0; i < kCifarPixels; ++i)
    mixed.pixels[i] = static_cast<std::uint8_t>(
        std::lround(lambda * recs[a].pixels[i] + (1.0 - lambda) * recs[b].pixels[i]));
  fs::create_directories(out);
  write_effective_config(out, sub);
  detail::write_text(fs::path(out) / "A.ppm", ppm(recs[a].pixels));
  detail::write_text(fs::path(out) / "B.ppm", ppm(recs[b].pixels));
  detail::write_text(fs::path(out) / "mixed.ppm", ppm(mixed.pixels));
  std::cout << "A: " << split << "[" << a << "] label " << int(recs[a].label) << "\nB: " << split << "[" << b
            << "] label " << int(recs[b].label) << "\nlambda " << lambda << " -> target " << lambda << " * onehot("
            << int(recs[a].label) << ") + " << 1 - lambda << " * onehot(" << int(recs[b].label) << ")\n"
            << "wrote A.ppm, B.ppm, mixed.ppm to " << out << "\n";
  return kOk;
}

int cmd_gradcheck(CLI::App* sub, const std::string& op, int trials, std::uint64_t seed, const std::string& corrupt,
                  const std::string& out) {
  if (trials < 1) throw ConfigError("--trials must be >= 1");
  std::optional<CorruptBackwardGuard> guard;
  if (!corrupt.empty()) guard.emplace(corrupt.c_str());
  const auto results = run_gradcheck_suite(op, trials, seed);
  if (!out.empty()) write_effective_config(out, sub);
  std::cout << std::left << std::setw(22) << "op" << std::setw(6) << "prec" << std::setw(8) << "trials"
            << std::setw(14) << "worst_rel" << std::setw(11) << "threshold" << "result\n";
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::ostringstream worst, thr;
    worst << std::scientific << std::setprecision(3) << r.worst_rel_error;
    thr << std::scientific << std::setprecision(0) << r.threshold;
    std::cout << std::left << std::setw(22) << r.op << std::setw(6) << r.precision << std::setw(8) << r.trials
              << std::setw(14) << worst.str() << std::setw(11) << thr.str() << (r.passed() ? "PASS" : "FAIL") << "\n";
    if (!r.passed()) failed.push_back(r.op + " (" + r.precision + ")");
  }
  if (!failed.empty()) {
    std::cerr << "gradcheck failed:";
    for (const auto& f : failed) std::cerr << " " << f;
    std::cerr << "\n";
    return kCheckFailed;
  }
  return kOk;
}

int cmd_synth(CLI::App* sub, const std::string& out, std::size_t n_train, std::size_t n_test, std::uint64_t seed,
              float noise) {
  if (out.empty()) throw ConfigError("--out is required");
  // One draw so both splits share the class colors.
  const DatasetSplit all = synthetic_dataset(n_train + n_test, kCifarClasses, seed, noise, "synthetic");
  const auto train = split_to_records(slice(all, 0, n_train, "train"));
  const auto test = split_to_records(slice(all, n_train, n_train + n_test, "test"));
  write_cifar10_directory(out, train, test);
  write_effective_config(out, sub);
  std::cout << "wrote " << n_train << " training and " << n_test << " test images to " << out << "\n";
  return kOk;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DimensionError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DegenerateDataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"mixres: pre-activation GELU ResNet with mixup on CIFAR-10"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI file with one [subcommand] section; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);

  // train
  TrainFlags train_flags;
  ModelFlags train_model;
  DataFlags train_data;
  std::string train_out = "runs/train";
  bool resume = false, dry_run = false;
  auto* train = app.add_subcommand("train", "Train one model and write its RunLog, CSVs and checkpoints");
  add_train_flags(train, train_flags);
  add_model_flags(train, train_model, "resnet50");
  add_data_flags(train, train_data);
  train->add_option("--out", train_out, "Output directory")->capture_default_str();
  train->add_flag("--resume", resume, "Continue from <out>/last.state");
  train->add_flag("--dry-run", dry_run, "Print the effective configuration and exit");

  // eval
  DataFlags eval_data;
  std::string checkpoint, eval_arch, eval_out;
  std::size_t eval_batch = 256;
  bool eval_json = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  add_data_flags(eval, eval_data);
  eval->add_option("--arch", eval_arch, "Fail unless the checkpoint has this architecture");
  eval->add_option("--batch-size", eval_batch, "Evaluation batch size")->capture_default_str();
  eval->add_flag("--json", eval_json, "Print a JSON object");
  eval->add_option("--out", eval_out, "Directory for effective_config.ini");

  // sweep
  std::string spec_path, sweep_out = "runs/sweep";
  ModelFlags sweep_model;
  DataFlags sweep_data_flags;
  int jobs = 1;
  bool sweep_on_test = false, sweep_no_augment = false;
  std::optional<std::uint64_t> sweep_seed;
  auto* sweep = app.add_subcommand("sweep", "Hyperband sweep with correlation and parallel-coordinates reports");
  sweep->add_option("--spec", spec_path, "Sweep spec INI ([sweep] and [param.NAME] sections)");
  add_model_flags(sweep, sweep_model, "tiny");
  add_data_flags(sweep, sweep_data_flags);
  sweep->add_option("--out", sweep_out, "Output directory")->capture_default_str();
  sweep->add_option("--jobs", jobs, "Trials trained in parallel within a rung")->capture_default_str();
  sweep->add_flag("--sweep-on-test", sweep_on_test, "Score trials on the test split instead of a validation slice");
  sweep->add_option("--seed", sweep_seed, "Override the seed in the --spec file");
  sweep->add_flag("--no-augment", sweep_no_augment, "Disable random crop and horizontal flip");

  // compare-mixup
  TrainFlags cmp_flags;
  ModelFlags cmp_model;
  DataFlags cmp_data;
  std::string cmp_out = "runs/compare";
  auto* compare = app.add_subcommand("compare-mixup", "Train with and without mixup and report loss ratios");
  add_train_flags(compare, cmp_flags);
  add_model_flags(compare, cmp_model, "resnet50");
  add_data_flags(compare, cmp_data);
  compare->add_option("--out", cmp_out, "Output directory")->capture_default_str();

  // mixup-preview
  DataFlags prev_data;
  std::string prev_split = "train", prev_out = "runs/preview";
  std::size_t idx_a = 0, idx_b = 1;
  double lambda = 0.3;
  auto* preview = app.add_subcommand("mixup-preview", "Write two images and their mixup blend as PPM files");
  prev_data.dir.clear();
  preview->add_option("--data-dir", prev_data.dir, "CIFAR-10 binary directory")->envname("MIXRES_DATA_DIR");
  preview->add_option("--split", prev_split, "train | test")->capture_default_str();
  preview->add_option("--a", idx_a, "Index of image A")->capture_default_str();
  preview->add_option("--b", idx_b, "Index of image B")->capture_default_str();
  preview->add_option("--lambda", lambda, "Weight of image A")->capture_default_str();
  preview->add_option("--out", prev_out, "Output directory")->capture_default_str();

  // gradcheck
  std::string gc_op, gc_corrupt, gc_out;
  int gc_trials = 100;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--op", gc_op, "Check only this op");
  gradcheck->add_option("--trials", gc_trials, "Random instances per op and precision")->capture_default_str();
  gradcheck->add_option("--seed", gc_seed, "Random seed")->capture_default_str();
  gradcheck->add_option("--out", gc_out, "Directory for effective_config.ini");
  gradcheck->add_option("--corrupt-backward", gc_corrupt, "Scale one op's backward by 1.01 (negative control)")
      ->group("");

  // synth-data
  std::string synth_out;
  std::size_t synth_train = 500, synth_test = 100;
  std::uint64_t synth_seed = 0;
  float synth_noise = 0.1f;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic CIFAR-10-format directory");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--train", synth_train, "Training images")->capture_default_str();
  synth->add_option("--test", synth_test, "Test images")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
  synth->add_option("--noise", synth_noise, "Pixel noise standard deviation")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*train) return guarded([&] { return cmd_train(train, train_flags, train_model, train_data, train_out, resume, dry_run); });
  if (*eval)
    return guarded([&] { return cmd_eval(eval, eval_data, checkpoint, eval_arch, eval_batch, eval_json, eval_out); });
  if (*sweep)
    return guarded([&] {
      return cmd_sweep(sweep, spec_path, sweep_model, sweep_data_flags, sweep_out, jobs, sweep_on_test, sweep_seed,
                       sweep_no_augment);
    });
  if (*compare) return guarded([&] { return cmd_compare(compare, cmp_flags, cmp_model, cmp_data, cmp_out); });
  if (*preview)
    return guarded([&] { return cmd_preview(preview, prev_data, prev_split, idx_a, idx_b, lambda, prev_out); });
  if (*gradcheck) return guarded([&] { return cmd_gradcheck(gradcheck, gc_op, gc_trials, gc_seed, gc_corrupt, gc_out); });
  if (*synth) return guarded([&] { return cmd_synth(synth, synth_out, synth_train, synth_test, synth_seed, synth_noise); });
  return kUsage;
}
