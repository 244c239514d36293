#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mixres/augment.hpp"
#include "mixres/cifar.hpp"
#include "mixres/errors.hpp"
#include "mixres/trainer.hpp"

namespace mixres {

enum class ParamKind { Continuous, Integer, Categorical };

inline const char* to_string(ParamKind k) {
  switch (k) {
    case ParamKind::Continuous: return "continuous";
    case ParamKind::Integer: return "integer";
    default: return "categorical";
  }
}

struct ParamSpec {
  std::string name;
  ParamKind kind = ParamKind::Continuous;
  double lo = 0, hi = 1;
  bool log_scale = false;
  std::vector<std::string> choices;

  static ParamSpec continuous(std::string name, double lo, double hi, bool log_scale = false) {
    return {std::move(name), ParamKind::Continuous, lo, hi, log_scale, {}};
  }
  static ParamSpec integer(std::string name, long lo, long hi) {
    return {std::move(name), ParamKind::Integer, static_cast<double>(lo), static_cast<double>(hi), false, {}};
  }
  static ParamSpec categorical(std::string name, std::vector<std::string> choices) {
    return {std::move(name), ParamKind::Categorical, 0, 0, false, std::move(choices)};
  }

  void validate() const {
    if (name.empty()) throw ConfigError("parameter with empty name");
    if (kind == ParamKind::Categorical) {
      if (choices.empty()) throw ConfigError("param." + name + ".values: categorical needs at least one value");
      return;
    }
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
      throw ConfigError("param." + name + ".low/high: require low < high");
    if (log_scale && !(lo > 0)) throw ConfigError("param." + name + ".low: log scale requires low > 0");
    if (kind == ParamKind::Integer && (lo != std::floor(lo) || hi != std::floor(hi)))
      throw ConfigError("param." + name + ".low/high: integer bounds required");
  }
};

struct SearchSpace {
  std::vector<ParamSpec> params;

  void validate() const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].validate();
      for (std::size_t j = 0; j < i; ++j)
        if (params[j].name == params[i].name) throw ConfigError("param." + params[i].name + ": duplicate parameter");
    }
  }

  const ParamSpec* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }

  static SearchSpace default_space() {
    return {{ParamSpec::continuous("lr", 1e-3, 1e-1, true),
             ParamSpec::categorical("batch_size", {"32", "64", "128", "256"}),
             ParamSpec::continuous("mixup_alpha", 0.1, 1.0), ParamSpec::continuous("momentum", 0.5, 0.99),
             ParamSpec::continuous("weight_decay", 1e-5, 1e-3, true)}};
  }
};

struct ParamValue {
  std::string name;
  double value = 0;   // numeric value; for categorical, the choice index
  std::string label;  // textual form (the choice itself for categorical)
};

struct SampledConfig {
  std::vector<ParamValue> values;

  const ParamValue& at(const std::string& name) const {
    for (const auto& v : values)
      if (v.name == name) return v;
    throw UsageError("sampled config has no parameter '" + name + "'");
  }
  bool has(const std::string& name) const {
    return std::any_of(values.begin(), values.end(), [&](const ParamValue& v) { return v.name == name; });
  }
};

namespace detail {
inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}
}  // namespace detail

/// Independent draw of every parameter; log-scale ones are uniform in log space.
inline SampledConfig sample_config(const SearchSpace& space, Rng& rng) {
  space.validate();
  SampledConfig out;
  for (const auto& p : space.params) {
    ParamValue v{p.name, 0, ""};
    switch (p.kind) {
      case ParamKind::Continuous:
        if (p.log_scale)
          v.value = std::exp(std::log(p.lo) + rng.uniform() * (std::log(p.hi) - std::log(p.lo)));
        else
          v.value = p.lo + rng.uniform() * (p.hi - p.lo);
        v.label = detail::format_number(v.value);
        break;
      case ParamKind::Integer: {
        const auto k = static_cast<long long>(rng.uniform_int(0, static_cast<std::size_t>(p.hi - p.lo)));
        v.value = p.lo + static_cast<double>(k);
        v.label = std::to_string(static_cast<long long>(v.value));
        break;
      }
      case ParamKind::Categorical: {
        const auto k = rng.uniform_int(0, p.choices.size() - 1);
        v.value = static_cast<double>(k);
        v.label = p.choices[k];
        break;
      }
    }
    out.values.push_back(std::move(v));
  }
  return out;
}

struct RungPlan {
  std::size_t n_configs = 0;
  double resource = 0;
};

struct BracketPlan {
  int s = 0;
  std::vector<RungPlan> rungs;
};

/// Largest s with eta^s <= R.
inline int hyperband_s_max(double R, int eta) {
  if (!(R >= 1)) throw ConfigError("hyperband: R must be >= 1");
  if (eta < 2) throw ConfigError("hyperband: eta must be >= 2");
  int s = 0;
  double p = eta;
  while (p <= R * (1 + 1e-12)) {
    ++s;
    p *= eta;
  }
  return s;
}

/// Bracket s starts n = ceil((s_max+1) * eta^s / (s+1)) configs at
/// r = R * eta^-s; rung i has floor(n / eta^i) configs at r * eta^i.
inline std::vector<BracketPlan> hyperband_schedule(double R, int eta) {
  const int s_max = hyperband_s_max(R, eta);
  std::vector<BracketPlan> out;
  for (int s = s_max; s >= 0; --s) {
    const auto eta_s = static_cast<std::size_t>(std::llround(std::pow(eta, s)));
    const std::size_t n = (static_cast<std::size_t>(s_max + 1) * eta_s + static_cast<std::size_t>(s)) /
                          static_cast<std::size_t>(s + 1);
    BracketPlan b{s, {}};
    std::size_t ni = n, scale = 1;
    for (int i = 0; i <= s; ++i) {
      b.rungs.push_back({ni, R * static_cast<double>(scale) / static_cast<double>(eta_s)});
      ni /= static_cast<std::size_t>(eta);
      scale *= static_cast<std::size_t>(eta);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// Sum of n_configs * resource over every rung of every bracket.
inline double total_budget(const std::vector<BracketPlan>& plan) {
  double t = 0;
  for (const auto& b : plan)
    for (const auto& r : b.rungs) t += static_cast<double>(r.n_configs) * r.resource;
  return t;
}

enum class TrialStatus { Running, Stopped, Complete, Failed };

inline const char* to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::Running: return "running";
    case TrialStatus::Stopped: return "stopped";
    case TrialStatus::Complete: return "complete";
    default: return "failed";
  }
}

struct CurvePoint {
  double resource = 0;
  double metric = 0;
};

struct Trial {
  std::size_t id = 0;
  int bracket = 0;
  SampledConfig config;
  std::uint64_t seed = 0;
  double resource = 0;  // largest resource granted so far
  double metric = -std::numeric_limits<double>::infinity();  // best metric so far
  TrialStatus status = TrialStatus::Running;
  std::vector<CurvePoint> curve;
  std::string error;
};

struct Evaluation {
  std::size_t trial = 0;
  int bracket = 0;
  int rung = 0;
  double resource = 0;
  double metric = 0;  // -inf when the objective failed
};

struct RungResult {
  RungPlan plan;
  std::vector<std::size_t> trials;
  std::vector<std::size_t> promoted;
};

struct BracketResult {
  int s = 0;
  std::vector<RungResult> rungs;
};

struct HyperbandResult {
  std::vector<Trial> trials;
  std::vector<BracketResult> brackets;
  std::vector<Evaluation> evaluations;
  std::optional<std::size_t> best;

  const Trial& best_trial() const {
    if (!best) throw ValidationError("hyperband: every trial failed");
    return trials[*best];
  }
};

/// Metric of `trial` after training to `resource`; higher is better, in [0, 1].
using Objective = std::function<double(const Trial&, double resource)>;

struct HyperbandOptions {
  std::uint64_t seed = 0;
  int jobs = 1;
  // Replaces sample_config; receives the trial id and its sampling stream.
  std::function<SampledConfig(std::size_t, Rng&)> sampler;
  std::function<void(const Evaluation&)> on_evaluation;
  // Called once a trial will receive no more resource.
  std::function<void(const Trial&)> on_trial_finished;
};

namespace detail {

inline constexpr std::uint64_t kSampleStream = 11, kTrialSeedStream = 12;

template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) f(i);
    });
  for (auto& t : pool) t.join();
}

/// Metric descending, ties by trial id ascending.
inline bool ranks_before(double ma, std::size_t ia, double mb, std::size_t ib) {
  if (ma != mb) return ma > mb;
  return ia < ib;
}

}  // namespace detail

/// Hyperband over randomly sampled configs. Trials within a rung run on up
/// to `jobs` threads; promotion happens once the whole rung has finished.
inline HyperbandResult hyperband(const SearchSpace& space, double R, int eta, const Objective& objective,
                                 const HyperbandOptions& options = {}) {
  space.validate();
  const auto plan = hyperband_schedule(R, eta);
  HyperbandResult result;
  const double neg_inf = -std::numeric_limits<double>::infinity();

  for (const auto& bp : plan) {
    BracketResult br{bp.s, {}};
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < bp.rungs.front().n_configs; ++k) {
      Trial t;
      t.id = result.trials.size();
      t.bracket = bp.s;
      Rng rng(derive_seed(options.seed, {detail::kSampleStream, t.id}));
      t.config = options.sampler ? options.sampler(t.id, rng) : sample_config(space, rng);
      t.seed = derive_seed(options.seed, {detail::kTrialSeedStream, t.id});
      active.push_back(t.id);
      result.trials.push_back(std::move(t));
    }

    for (std::size_t i = 0; i < bp.rungs.size(); ++i) {
      const RungPlan rp = bp.rungs[i];
      std::vector<double> metrics(active.size(), neg_inf);
      std::vector<std::string> errors(active.size());
      detail::parallel_for(active.size(), options.jobs, [&](std::size_t j) {
        try {
          const double m = objective(result.trials[active[j]], rp.resource);
          if (!std::isfinite(m) || m < 0 || m > 1)
            throw ValidationError("objective returned " + std::to_string(m) + ", outside [0, 1]");
          metrics[j] = m;
        } catch (const std::exception& e) {
          errors[j] = e.what();
        }
      });

      for (std::size_t j = 0; j < active.size(); ++j) {
        Trial& t = result.trials[active[j]];
        t.resource = rp.resource;
        if (!errors[j].empty()) {
          t.status = TrialStatus::Failed;
          t.error = errors[j];
          t.metric = neg_inf;
        } else {
          t.curve.push_back({rp.resource, metrics[j]});
          t.metric = std::max(t.metric, metrics[j]);
        }
        Evaluation ev{t.id, bp.s, static_cast<int>(i), rp.resource, metrics[j]};
        result.evaluations.push_back(ev);
        if (options.on_evaluation) options.on_evaluation(ev);
      }

      std::vector<std::size_t> order(active.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detail::ranks_before(metrics[a], active[a], metrics[b], active[b]);
      });
      RungResult rr{rp, active, {}};
      const bool last = i + 1 == bp.rungs.size();
      const std::size_t keep = last ? 0 : bp.rungs[i + 1].n_configs;
      for (std::size_t k = 0; k < order.size(); ++k) {
        Trial& t = result.trials[active[order[k]]];
        if (k < keep && t.status != TrialStatus::Failed) {
          rr.promoted.push_back(t.id);
          continue;
        }
        if (t.status != TrialStatus::Failed) t.status = last ? TrialStatus::Complete : TrialStatus::Stopped;
        if (options.on_trial_finished) options.on_trial_finished(t);
      }
      br.rungs.push_back(rr);
      active = rr.promoted;
      if (active.empty()) break;
    }
    result.brackets.push_back(std::move(br));
  }

  for (const auto& t : result.trials) {
    if (t.status == TrialStatus::Failed) continue;
    if (!result.best || detail::ranks_before(t.metric, t.id, result.trials[*result.best].metric, *result.best))
      result.best = t.id;
  }
  return result;
}

/// Pearson r of two equal-length samples; nullopt when either has zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson: length mismatch");
  const double n = static_cast<double>(x.size());
  if (x.size() < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const double scale_x = std::max(std::abs(mx), 1.0) * 1e-12, scale_y = std::max(std::abs(my), 1.0) * 1e-12;
  if (std::sqrt(sxx / n) <= scale_x || std::sqrt(syy / n) <= scale_y) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CorrelationEntry {
  std::string feature;  // parameter name, or name=value for a categorical level
  std::string param;
  double r = 0;
  bool degenerate = false;
  std::size_t rank = 0;  // 1 = strongest |r|
  std::size_t n = 0;
};

/// Correlation of every parameter (log-domain for log-scale ones, one
/// indicator per categorical value) with each trial's best metric, over
/// all trials that did not fail. Ranked by |r|.
inline std::vector<CorrelationEntry> correlation_report(const SearchSpace& space, const std::vector<Trial>& trials) {
  std::vector<const Trial*> ok;
  for (const auto& t : trials)
    if (t.status != TrialStatus::Failed && std::isfinite(t.metric)) ok.push_back(&t);
  if (ok.size() < 3)
    throw ValidationError("correlation_report: need at least 3 completed trials, have " + std::to_string(ok.size()));
  std::vector<double> y;
  for (const auto* t : ok) y.push_back(t->metric);

  std::vector<CorrelationEntry> out;
  auto add = [&](std::string feature, const std::string& param, const std::vector<double>& x) {
    const auto r = pearson(x, y);
    out.push_back({std::move(feature), param, r ? *r : 0.0, !r, 0, x.size()});
  };
  for (const auto& p : space.params) {
    if (p.kind == ParamKind::Categorical) {
      for (std::size_t c = 0; c < p.choices.size(); ++c) {
        std::vector<double> x;
        for (const auto* t : ok) x.push_back(t->config.at(p.name).label == p.choices[c] ? 1.0 : 0.0);
        add(p.name + "=" + p.choices[c], p.name, x);
      }
    } else {
      std::vector<double> x;
      for (const auto* t : ok) {
        const double v = t->config.at(p.name).value;
        x.push_back(p.log_scale ? std::log10(v) : v);
      }
      add(p.name, p.name, x);
    }
  }
  std::vector<std::size_t> order(out.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out[a].degenerate != out[b].degenerate) return !out[a].degenerate;
    return std::abs(out[a].r) > std::abs(out[b].r);
  });
  for (std::size_t k = 0; k < order.size(); ++k) out[order[k]].rank = k + 1;
  return out;
}

namespace detail {

inline std::string csv_metric(double m) { return std::isfinite(m) ? format_number(m) : std::string(); }

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace detail

inline std::string parallel_coordinates_csv(const SearchSpace& space, const std::vector<Trial>& trials) {
  std::string s = "trial";
  for (const auto& p : space.params) s += "," + detail::csv_field(p.name);
  s += ",resource,metric\n";
  for (const auto& t : trials) {
    s += std::to_string(t.id);
    for (const auto& p : space.params) s += "," + detail::csv_field(t.config.at(p.name).label);
    s += "," + detail::format_number(t.resource) + "," + detail::csv_metric(t.metric) + "\n";
  }
  return s;
}

inline std::string correlation_csv(const std::vector<CorrelationEntry>& entries) {
  std::string s = "feature,param,pearson_r,abs_r,importance_rank,degenerate,n\n";
  for (const auto& e : entries)
    s += detail::csv_field(e.feature) + "," + detail::csv_field(e.param) + "," + detail::format_number(e.r) + "," +
         detail::format_number(std::abs(e.r)) + "," + std::to_string(e.rank) + "," + (e.degenerate ? "1" : "0") +
         "," + std::to_string(e.n) + "\n";
  return s;
}

inline std::string curve_csv(const Trial& t) {
  std::string s = "resource,metric\n";
  for (const auto& p : t.curve) s += detail::format_number(p.resource) + "," + detail::format_number(p.metric) + "\n";
  return s;
}

/// Best metric so far against cumulative resource, in evaluation order.
inline std::string convergence_csv(const HyperbandResult& r) {
  std::string s = "evaluation,bracket,rung,trial,resource,metric,cumulative_resource,best_metric\n";
  double cum = 0, best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.evaluations.size(); ++i) {
    const auto& e = r.evaluations[i];
    cum += e.resource;
    if (std::isfinite(e.metric)) best = std::max(best, e.metric);
    s += std::to_string(i) + "," + std::to_string(e.bracket) + "," + std::to_string(e.rung) + "," +
         std::to_string(e.trial) + "," + detail::format_number(e.resource) + "," + detail::csv_metric(e.metric) +
         "," + detail::format_number(cum) + "," + detail::csv_metric(best) + "\n";
  }
  return s;
}

inline std::string rung_table(const std::vector<BracketPlan>& plan) {
  std::string s = "bracket,rung,n_configs,resource\n";
  for (const auto& b : plan)
    for (std::size_t i = 0; i < b.rungs.size(); ++i)
      s += std::to_string(b.s) + "," + std::to_string(i) + "," + std::to_string(b.rungs[i].n_configs) + "," +
           detail::format_number(b.rungs[i].resource) + "\n";
  return s;
}

/// Writes parallel_coordinates.csv, correlation.csv (when at least 3 trials
/// completed), convergence.csv, rungs.csv and curves/trial_<id>.csv.
inline void sweep_report(const SearchSpace& space, const HyperbandResult& result, double R, int eta,
                         const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "curves");
  detail::write_text(dir / "parallel_coordinates.csv", parallel_coordinates_csv(space, result.trials));
  detail::write_text(dir / "convergence.csv", convergence_csv(result));
  detail::write_text(dir / "rungs.csv", rung_table(hyperband_schedule(R, eta)));
  for (const auto& t : result.trials)
    detail::write_text(dir / "curves" / ("trial_" + std::to_string(t.id) + ".csv"), curve_csv(t));
  try {
    detail::write_text(dir / "correlation.csv", correlation_csv(correlation_report(space, result.trials)));
  } catch (const ValidationError&) {
    detail::write_text(dir / "correlation.csv", correlation_csv({}));
  }
}

struct SweepSpec {
  SearchSpace space = SearchSpace::default_space();
  double R = 9;
  int eta = 3;
  std::uint64_t seed = 0;
  std::size_t val_size = 5000;
  bool on_test = false;  // score trials on the test split instead of a validation slice

  void validate() const {
    if (!(R >= 1)) throw ConfigError("sweep.R: must be >= 1");
    if (eta < 2) throw ConfigError("sweep.eta: must be >= 2");
    if (!on_test && val_size < 1) throw ConfigError("sweep.val_size: must be >= 1");
    space.validate();
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::vector<std::string>& in) {
  if (in.size() != 1) throw ConfigError(key + ": expected one value");
  try {
    std::size_t pos = 0;
    const double v = std::stod(in[0], &pos);
    if (pos != in[0].size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + in[0] + "' is not a number");
  }
}

inline long long parse_int(const std::string& key, const std::vector<std::string>& in) {
  const double v = parse_double(key, in);
  if (v != std::floor(v)) throw ConfigError(key + ": '" + in[0] + "' is not an integer");
  return static_cast<long long>(v);
}

inline bool parse_bool(const std::string& key, const std::vector<std::string>& in) {
  if (in.size() != 1) throw ConfigError(key + ": expected one value");
  const auto& s = in[0];
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

}  // namespace detail

/// Sweep spec in INI form:
///   [sweep]        R, eta, seed, val_size, on_test
///   [param.NAME]   type = continuous|integer|categorical, scale = linear|log,
///                  low, high, values = a, b, c
/// Without any [param.*] section the default search space is used.
inline SweepSpec parse_sweep_spec(const std::string& text) {
  std::istringstream is(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(is);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("sweep spec: ") + e.what());
  }
  SweepSpec spec;
  std::map<std::string, std::map<std::string, std::vector<std::string>>> params;
  std::vector<std::string> param_order;
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    const auto& par = it.parents;
    if (par.empty() || (par.size() == 1 && par[0] == "sweep")) {
      const std::string key = "sweep." + it.name;
      if (it.name == "R") spec.R = detail::parse_double(key, it.inputs);
      else if (it.name == "eta") spec.eta = static_cast<int>(detail::parse_int(key, it.inputs));
      else if (it.name == "seed") spec.seed = static_cast<std::uint64_t>(detail::parse_int(key, it.inputs));
      else if (it.name == "val_size") spec.val_size = static_cast<std::size_t>(detail::parse_int(key, it.inputs));
      else if (it.name == "on_test") spec.on_test = detail::parse_bool(key, it.inputs);
      else throw ConfigError(key + ": unknown key");
    } else if (par.size() == 2 && par[0] == "param") {
      if (!params.count(par[1])) param_order.push_back(par[1]);
      params[par[1]][it.name] = it.inputs;
    } else {
      std::string key;
      for (const auto& p : par) key += p + ".";
      throw ConfigError(key + it.name + ": unknown section");
    }
  }
  if (!param_order.empty()) {
    spec.space.params.clear();
    for (const auto& name : param_order) {
      auto& kv = params[name];
      const std::string prefix = "param." + name + ".";
      ParamSpec p;
      p.name = name;
      if (!kv.count("type")) throw ConfigError(prefix + "type: missing");
      const auto& type = kv["type"];
      if (type.size() != 1) throw ConfigError(prefix + "type: expected one value");
      if (type[0] == "continuous") p.kind = ParamKind::Continuous;
      else if (type[0] == "integer") p.kind = ParamKind::Integer;
      else if (type[0] == "categorical") p.kind = ParamKind::Categorical;
      else throw ConfigError(prefix + "type: unknown type '" + type[0] + "'");
      for (const auto& [key, val] : kv) {
        if (key == "type") continue;
        if (key == "scale" && p.kind == ParamKind::Continuous) {
          if (val.size() != 1 || (val[0] != "log" && val[0] != "linear"))
            throw ConfigError(prefix + "scale: expected 'log' or 'linear'");
          p.log_scale = val[0] == "log";
        } else if ((key == "low" || key == "high") && p.kind != ParamKind::Categorical) {
          (key == "low" ? p.lo : p.hi) = detail::parse_double(prefix + key, val);
        } else if (key == "values" && p.kind == ParamKind::Categorical) {
          p.choices = val;
        } else {
          throw ConfigError(prefix + key + ": not valid for a " + type[0] + " parameter");
        }
      }
      if (p.kind != ParamKind::Categorical && (!kv.count("low") || !kv.count("high")))
        throw ConfigError(prefix + (kv.count("low") ? "high" : "low") + ": missing");
      spec.space.params.push_back(std::move(p));
    }
  }
  spec.validate();
  return spec;
}

inline SweepSpec load_sweep_spec(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read sweep spec " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_sweep_spec(ss.str());
}

inline std::string to_ini(const SweepSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "[sweep]\nR = " << s.R << "\neta = " << s.eta << "\nseed = " << s.seed << "\nval_size = " << s.val_size
     << "\non_test = " << (s.on_test ? "true" : "false") << "\n";
  for (const auto& p : s.space.params) {
    os << "\n[param." << p.name << "]\ntype = " << to_string(p.kind) << "\n";
    if (p.kind == ParamKind::Categorical) {
      os << "values = ";
      for (std::size_t i = 0; i < p.choices.size(); ++i) os << (i ? ", " : "") << p.choices[i];
      os << "\n";
    } else {
      if (p.kind == ParamKind::Continuous) os << "scale = " << (p.log_scale ? "log" : "linear") << "\n";
      os << "low = " << p.lo << "\nhigh = " << p.hi << "\n";
    }
  }
  return os.str();
}

/// Parameter names a TrainConfig can take from a sampled config.
inline const std::vector<std::string>& tunable_parameters() {
  static const std::vector<std::string> names{"lr", "batch_size", "mixup_alpha", "momentum", "weight_decay", "mixup"};
  return names;
}

inline TrainConfig apply_config(TrainConfig base, const SampledConfig& c) {
  for (const auto& v : c.values) {
    auto number = [&] {
      try {
        return std::stod(v.label);
      } catch (const std::exception&) {
        throw ConfigError("param." + v.name + ": '" + v.label + "' is not numeric");
      }
    };
    if (v.name == "lr") base.lr = number();
    else if (v.name == "batch_size") base.batch_size = static_cast<int>(std::llround(number()));
    else if (v.name == "mixup_alpha") base.mixup.alpha = number();
    else if (v.name == "momentum") base.momentum = number();
    else if (v.name == "weight_decay") base.weight_decay = number();
    else if (v.name == "mixup") base.mixup.enabled = v.label == "true" || v.label == "on" || v.label == "1";
    else throw ConfigError("param." + v.name + ": not a tunable training parameter");
  }
  return base;
}

inline void check_tunable(const SearchSpace& space) {
  const auto& names = tunable_parameters();
  for (const auto& p : space.params)
    if (std::find(names.begin(), names.end(), p.name) == names.end())
      throw ConfigError("param." + p.name + ": not a tunable training parameter");
}

/// Epochs granted for a hyperband resource (nearest integer, at least 1).
inline int epochs_for(double resource) { return std::max(1, static_cast<int>(std::llround(resource))); }

/// Objective that trains each trial's model and scores accuracy on the
/// evaluation split. A trial's model and optimizer persist between rungs so
/// a promotion continues training; the cosine schedule spans R epochs.
class TrainingObjective {
 public:
  TrainingObjective(TrainConfig base, ResNetConfig model, const TrainingData& data, double R,
                    std::optional<std::filesystem::path> trials_dir = {})
      : base_(std::move(base)), model_(model), data_(data), trials_dir_(std::move(trials_dir)) {
    base_.t_max = epochs_for(R);
    base_.epochs = base_.t_max;
    base_.eval_every = base_.t_max;
  }

  double operator()(const Trial& trial, double resource) {
    Entry* e;
    {
      std::lock_guard lock(mu_);
      auto& slot = entries_[trial.id];
      if (!slot) {
        TrainConfig cfg = apply_config(base_, trial.config);
        cfg.seed = trial.seed;
        slot = std::make_unique<Entry>(Entry{std::make_unique<TrainingRun>(cfg, model_), {}});
        slot->log.config["type"] = "config";
        slot->log.config["trial"] = trial.id;
        slot->log.config["train"] = to_json(cfg);
        slot->log.config["model"] = to_json(model_);
      }
      e = slot.get();
    }
    const int target = std::min(epochs_for(resource), base_.t_max);
    while (e->run->epochs_done() < target) {
      EpochMetrics m;
      const auto st = e->run->run_epoch(data_.train, &m.lr);
      m.epoch = e->run->epochs_done();
      m.train_loss = st.loss;
      m.train_hard_loss = st.hard_loss;
      m.train_accuracy = st.accuracy;
      e->log.epochs.push_back(m);
    }
    const auto ev = evaluate(e->run->model(), data_.test);
    auto& last = e->log.epochs.back();
    last.test_loss = ev.loss;
    last.test_error_pct = ev.error_pct;
    detail::update_summary(e->log);
    if (trials_dir_) {
      std::filesystem::create_directories(*trials_dir_);
      detail::write_text(*trials_dir_ / ("trial_" + std::to_string(trial.id) + ".jsonl"), runlog_jsonl(e->log));
    }
    return static_cast<double>(ev.correct) / static_cast<double>(ev.total);
  }

  /// Frees the model of a trial that will not be trained further.
  void release(std::size_t trial_id) {
    std::lock_guard lock(mu_);
    entries_.erase(trial_id);
  }

 private:
  struct Entry {
    std::unique_ptr<TrainingRun> run;
    RunLog log;
  };
  TrainConfig base_;
  ResNetConfig model_;
  const TrainingData& data_;
  std::optional<std::filesystem::path> trials_dir_;
  std::mutex mu_;
  std::map<std::size_t, std::unique_ptr<Entry>> entries_;
};

/// Splits a raw training split into sweep-train and validation (the last
/// val_size images), or scores on the test split when on_test is set.
inline TrainingData sweep_data(const DatasetSplit& train_raw, const DatasetSplit& test_raw, const SweepSpec& spec) {
  if (spec.on_test) return prepare_data(train_raw, test_raw);
  if (spec.val_size >= train_raw.size())
    throw ConfigError("sweep.val_size: " + std::to_string(spec.val_size) + " leaves no training images out of " +
                      std::to_string(train_raw.size()));
  const std::size_t cut = train_raw.size() - spec.val_size;
  return prepare_data(slice(train_raw, 0, cut, "sweep_train"), slice(train_raw, cut, train_raw.size(), "validation"));
}

}  // namespace mixres
