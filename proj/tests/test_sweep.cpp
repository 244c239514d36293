#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <unistd.h>

#include "mixres/runtime.hpp"
#include "mixres/sweep.hpp"

using namespace mixres;
namespace fs = std::filesystem;

namespace {

const bool kAllocatorTuned = (tune_allocator(), true);

std::vector<std::pair<std::size_t, double>> rungs_of(const BracketPlan& b) {
  std::vector<std::pair<std::size_t, double>> out;
  for (const auto& r : b.rungs) out.emplace_back(r.n_configs, r.resource);
  return out;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',')
      out.emplace_back();
    else
      out.back() += c;
  }
  return out;
}

Trial trial_with(std::size_t id, std::vector<ParamValue> values, double metric) {
  Trial t;
  t.id = id;
  t.config.values = std::move(values);
  t.metric = metric;
  t.status = TrialStatus::Complete;
  return t;
}

// Deterministic pseudo-random metric in [0, 1] per (seed, trial, resource).
double hashed_metric(std::uint64_t seed, std::size_t trial, double resource) {
  Rng rng(derive_seed(seed, {trial, static_cast<std::uint64_t>(resource * 1000)}));
  return rng.uniform();
}

}  // namespace

TEST(Schedule, Reference81By3) {
  const auto plan = hyperband_schedule(81, 3);
  ASSERT_EQ(plan.size(), 5u);
  using R = std::vector<std::pair<std::size_t, double>>;
  EXPECT_EQ(plan[0].s, 4);
  EXPECT_EQ(rungs_of(plan[0]), (R{{81, 1}, {27, 3}, {9, 9}, {3, 27}, {1, 81}}));
  EXPECT_EQ(rungs_of(plan[1]), (R{{34, 3}, {11, 9}, {3, 27}, {1, 81}}));
  EXPECT_EQ(rungs_of(plan[2]), (R{{15, 9}, {5, 27}, {1, 81}}));
  EXPECT_EQ(rungs_of(plan[3]), (R{{8, 27}, {2, 81}}));
  EXPECT_EQ(rungs_of(plan[4]), (R{{5, 81}}));
  EXPECT_EQ(total_budget(plan), 1902.0);
}

TEST(Schedule, SingleEpochBudget) {
  const auto plan = hyperband_schedule(1, 3);
  ASSERT_EQ(plan.size(), 1u);
  EXPECT_EQ(plan[0].s, 0);
  ASSERT_EQ(plan[0].rungs.size(), 1u);
  EXPECT_EQ(plan[0].rungs[0].n_configs, 1u);
  EXPECT_EQ(plan[0].rungs[0].resource, 1.0);
}

TEST(Schedule, BudgetBoundAndRecurrence) {
  for (int eta = 2; eta <= 5; ++eta)
    for (int R = 1; R <= 300; ++R) {
      const auto plan = hyperband_schedule(R, eta);
      const int s_max = hyperband_s_max(R, eta);
      ASSERT_EQ(static_cast<int>(plan.size()), s_max + 1);
      EXPECT_LE(total_budget(plan), double(s_max + 1) * (s_max + 1) * R) << "R=" << R << " eta=" << eta;
      for (const auto& b : plan) {
        EXPECT_DOUBLE_EQ(b.rungs.back().resource, R);
        for (std::size_t i = 1; i < b.rungs.size(); ++i) {
          EXPECT_EQ(b.rungs[i].n_configs, b.rungs[i - 1].n_configs / static_cast<std::size_t>(eta));
          EXPECT_DOUBLE_EQ(b.rungs[i].resource, b.rungs[i - 1].resource * eta);
          EXPECT_GE(b.rungs[i].n_configs, 1u);
        }
      }
    }
}

TEST(Schedule, InvalidArguments) {
  EXPECT_THROW(hyperband_schedule(0.5, 3), ConfigError);
  EXPECT_THROW(hyperband_schedule(9, 1), ConfigError);
}

TEST(Hyperband, DominantConfigWins) {
  SearchSpace space{{ParamSpec::categorical("arm", {"A", "B"})}};
  HyperbandOptions opt;
  opt.sampler = [](std::size_t id, Rng&) {
    return SampledConfig{{{"arm", static_cast<double>(id % 2), id % 2 == 0 ? "A" : "B"}}};
  };
  // Run with A on the even ids and again on the odd ids, so the id
  // tie-break cannot be what picks A.
  for (const bool a_first : {true, false}) {
    auto o = opt;
    if (!a_first)
      o.sampler = [](std::size_t id, Rng&) {
        return SampledConfig{{{"arm", static_cast<double>(1 - id % 2), id % 2 == 0 ? "B" : "A"}}};
      };
    const auto r = hyperband(space, 2, 2,
                             [](const Trial& t, double resource) {
                               const bool is_a = t.config.at("arm").label == "A";
                               return is_a ? 0.5 + 0.1 * resource : 0.4 + 0.1 * resource;
                             },
                             o);
    ASSERT_TRUE(r.best.has_value());
    EXPECT_EQ(r.best_trial().config.at("arm").label, "A");
  }
}

TEST(Hyperband, PromotionSoundnessOnRandomObjectives) {
  const auto space = SearchSpace::default_space();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double R = 3 + static_cast<double>(seed % 25);
    const int eta = 2 + static_cast<int>(seed % 3);
    HyperbandOptions opt;
    opt.seed = seed;
    const auto r = hyperband(
        space, R, eta,
        [seed](const Trial& t, double resource) {
          // A few ties to exercise the id tie-break.
          const double m = hashed_metric(seed, t.id, resource);
          return t.id % 7 == 0 ? 0.5 : m;
        },
        opt);
    std::map<std::pair<std::size_t, double>, double> metric_at;
    for (const auto& e : r.evaluations) metric_at[{e.trial, e.resource}] = e.metric;
    for (const auto& b : r.brackets)
      for (const auto& rung : b.rungs) {
        const std::set<std::size_t> promoted(rung.promoted.begin(), rung.promoted.end());
        for (std::size_t p : rung.promoted)
          for (std::size_t q : rung.trials) {
            if (promoted.count(q)) continue;
            const double mp = metric_at.at({p, rung.plan.resource}), mq = metric_at.at({q, rung.plan.resource});
            ASSERT_TRUE(mp > mq || (mp == mq && p < q)) << "seed " << seed;
          }
      }
    // The best trial has the largest metric among all trials.
    ASSERT_TRUE(r.best.has_value());
    for (const auto& t : r.trials) EXPECT_LE(t.metric, r.best_trial().metric);
  }
}

TEST(Hyperband, FollowsThePlan) {
  std::size_t calls = 0;
  double spent = 0;
  const auto r = hyperband(SearchSpace::default_space(), 9, 3, [&](const Trial&, double resource) {
    ++calls;
    spent += resource;
    return 0.5;
  });
  const auto plan = hyperband_schedule(9, 3);
  std::size_t expect_calls = 0, expect_trials = 0;
  for (const auto& b : plan) {
    expect_trials += b.rungs.front().n_configs;
    for (const auto& rung : b.rungs) expect_calls += rung.n_configs;
  }
  EXPECT_EQ(calls, expect_calls);
  EXPECT_EQ(r.trials.size(), expect_trials);
  EXPECT_EQ(spent, total_budget(plan));
  for (const auto& t : r.trials) {
    EXPECT_NE(t.status, TrialStatus::Running);
    EXPECT_GE(t.resource, 1.0);
  }
}

TEST(Hyperband, FailedTrialsScoreNegativeInfinity) {
  std::vector<std::size_t> finished;
  HyperbandOptions opt;
  opt.on_trial_finished = [&](const Trial& t) { finished.push_back(t.id); };
  const auto r = hyperband(
      SearchSpace::default_space(), 9, 3,
      [](const Trial& t, double) -> double {
        if (t.id % 3 == 0) throw std::runtime_error("boom");
        if (t.id % 3 == 1) return 1.5;  // outside [0, 1]
        return 0.25;
      },
      opt);
  for (const auto& t : r.trials) {
    if (t.id % 3 == 2) continue;
    EXPECT_EQ(t.status, TrialStatus::Failed);
    EXPECT_EQ(t.metric, -std::numeric_limits<double>::infinity());
    EXPECT_FALSE(t.error.empty());
  }
  for (const auto& b : r.brackets)
    for (const auto& rung : b.rungs)
      for (std::size_t p : rung.promoted) EXPECT_EQ(p % 3, 2u);
  ASSERT_TRUE(r.best.has_value());
  EXPECT_EQ(r.best_trial().metric, 0.25);
  EXPECT_EQ(finished.size(), r.trials.size());
}

TEST(Hyperband, SameSeedSameTrialsAndParallelAgrees) {
  const auto space = SearchSpace::default_space();
  auto objective = [](const Trial& t, double resource) { return hashed_metric(t.seed, 0, resource); };
  HyperbandOptions a, b;
  a.seed = b.seed = 42;
  b.jobs = 4;
  const auto ra = hyperband(space, 9, 3, objective, a), rb = hyperband(space, 9, 3, objective, b);
  ASSERT_EQ(ra.trials.size(), rb.trials.size());
  for (std::size_t i = 0; i < ra.trials.size(); ++i) {
    EXPECT_EQ(ra.trials[i].seed, rb.trials[i].seed);
    EXPECT_EQ(ra.trials[i].metric, rb.trials[i].metric);
    EXPECT_EQ(ra.trials[i].config.values.size(), rb.trials[i].config.values.size());
  }
  EXPECT_EQ(ra.best, rb.best);
}

TEST(Sampling, LogUniformExponent) {
  SearchSpace space{{ParamSpec::continuous("lr", 1e-3, 1e-1, true)}};
  Rng rng(11);
  std::vector<double> u;
  for (int i = 0; i < 10000; ++i) {
    const double v = sample_config(space, rng).at("lr").value;
    ASSERT_GE(v, 1e-3);
    ASSERT_LE(v, 1e-1);
    u.push_back((std::log10(v) + 3) / 2);
  }
  std::sort(u.begin(), u.end());
  double ks = 0;
  for (std::size_t i = 0; i < u.size(); ++i)
    ks = std::max({ks, u[i] - double(i) / u.size(), double(i + 1) / u.size() - u[i]});
  EXPECT_LT(ks, 0.02);
}

TEST(Sampling, SingleChoiceAndIntegers) {
  SearchSpace space{{ParamSpec::categorical("batch_size", {"64"}), ParamSpec::integer("depth", 2, 4)}};
  Rng rng(1);
  std::set<double> depths;
  for (int i = 0; i < 200; ++i) {
    const auto c = sample_config(space, rng);
    EXPECT_EQ(c.at("batch_size").label, "64");
    const double d = c.at("depth").value;
    EXPECT_EQ(d, std::floor(d));
    depths.insert(d);
  }
  EXPECT_EQ(depths, (std::set<double>{2, 3, 4}));
}

TEST(Sampling, SameSeedSameSequence) {
  const auto space = SearchSpace::default_space();
  Rng a(5), b(5);
  for (int i = 0; i < 20; ++i) {
    const auto ca = sample_config(space, a), cb = sample_config(space, b);
    ASSERT_EQ(ca.values.size(), space.params.size());
    for (std::size_t k = 0; k < ca.values.size(); ++k) {
      EXPECT_EQ(ca.values[k].value, cb.values[k].value);
      EXPECT_EQ(ca.values[k].label, cb.values[k].label);
    }
  }
}

TEST(Space, Validation) {
  EXPECT_THROW(ParamSpec::continuous("lr", 0.1, 0.1).validate(), ConfigError);
  EXPECT_THROW(ParamSpec::continuous("lr", 0, 1, true).validate(), ConfigError);
  EXPECT_THROW(ParamSpec::categorical("b", {}).validate(), ConfigError);
  EXPECT_THROW((SearchSpace{{ParamSpec::integer("a", 1, 2), ParamSpec::integer("a", 1, 3)}}.validate()), ConfigError);
  EXPECT_NO_THROW(SearchSpace::default_space().validate());
}

TEST(Pearson, HandExamples) {
  const std::vector<double> x{1, 2, 3}, up{1, 3, 5}, down{5, 3, 1}, flat{2, 2, 2};
  EXPECT_NEAR(*pearson(x, up), 1.0, 1e-15);
  EXPECT_NEAR(*pearson(x, down), -1.0, 1e-15);
  EXPECT_FALSE(pearson(x, flat).has_value());
  EXPECT_FALSE(pearson(flat, x).has_value());
}

TEST(Correlation, ReportRanksAndFlags) {
  SearchSpace space{{ParamSpec::continuous("lr", 1e-3, 1e-1, true), ParamSpec::continuous("momentum", 0.5, 0.99),
                     ParamSpec::categorical("batch_size", {"32", "64"})}};
  std::vector<Trial> trials;
  const double lrs[] = {1e-3, 1e-2, 1e-1, 1e-2};
  const double moms[] = {0.9, 0.6, 0.7, 0.8};
  for (std::size_t i = 0; i < 4; ++i)
    trials.push_back(trial_with(i,
                                {{"lr", lrs[i], detail::format_number(lrs[i])},
                                 {"momentum", moms[i], detail::format_number(moms[i])},
                                 {"batch_size", 0, "32"}},
                                // metric equals log10(lr): r = 1 in the log domain
                                (std::log10(lrs[i]) + 3) / 2));
  const auto rep = correlation_report(space, trials);
  std::map<std::string, CorrelationEntry> by;
  for (const auto& e : rep) by[e.feature] = e;
  EXPECT_NEAR(by.at("lr").r, 1.0, 1e-12);
  EXPECT_EQ(by.at("lr").rank, 1u);
  EXPECT_FALSE(by.at("lr").degenerate);
  // Every trial used batch 32: both levels are constant.
  EXPECT_TRUE(by.at("batch_size=32").degenerate);
  EXPECT_EQ(by.at("batch_size=32").r, 0.0);
  EXPECT_TRUE(by.at("batch_size=64").degenerate);
  EXPECT_EQ(rep.back().degenerate, true);
  for (const auto& e : rep) EXPECT_EQ(e.n, 4u);
}

TEST(Correlation, ConstantMetricAllDegenerate) {
  SearchSpace space{{ParamSpec::continuous("momentum", 0.5, 0.99)}};
  std::vector<Trial> trials;
  for (std::size_t i = 0; i < 5; ++i)
    trials.push_back(trial_with(i, {{"momentum", 0.5 + 0.1 * i, ""}}, 0.7));
  for (const auto& e : correlation_report(space, trials)) EXPECT_TRUE(e.degenerate);
}

TEST(Correlation, AffineInvariantAndIgnoresFailures) {
  const auto space = SearchSpace::default_space();
  Rng rng(3);
  std::vector<Trial> trials, scaled;
  for (std::size_t i = 0; i < 30; ++i) {
    auto t = trial_with(i, sample_config(space, rng).values, rng.uniform());
    auto s = t;
    s.metric = 0.25 * t.metric + 0.1;
    trials.push_back(t);
    scaled.push_back(s);
  }
  auto failed = trial_with(30, sample_config(space, rng).values, -std::numeric_limits<double>::infinity());
  failed.status = TrialStatus::Failed;
  scaled.push_back(failed);
  const auto a = correlation_report(space, trials), b = correlation_report(space, scaled);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].feature, b[i].feature);
    EXPECT_NEAR(a[i].r, b[i].r, 1e-12);
    EXPECT_EQ(b[i].n, 30u);
  }
  trials.resize(2);
  EXPECT_THROW(correlation_report(space, trials), ValidationError);
}

TEST(Report, SchemaAndRowCounts) {
  const auto dir = fs::temp_directory_path() / ("mixres_sweep_report_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto space = SearchSpace::default_space();
  HyperbandOptions opt;
  opt.seed = 8;
  const auto r = hyperband(space, 9, 3, [](const Trial& t, double res) { return hashed_metric(t.seed, 1, res); }, opt);
  sweep_report(space, r, 9, 3, dir);

  const auto pc = lines_of(dir / "parallel_coordinates.csv");
  ASSERT_EQ(pc.size(), r.trials.size() + 1);
  std::vector<std::string> expect{"trial"};
  for (const auto& p : space.params) expect.push_back(p.name);
  expect.push_back("resource");
  expect.push_back("metric");
  EXPECT_EQ(split_csv(pc[0]), expect);
  for (std::size_t i = 1; i < pc.size(); ++i) EXPECT_EQ(split_csv(pc[i]).size(), expect.size());

  for (const auto& t : r.trials) {
    const auto curve = lines_of(dir / "curves" / ("trial_" + std::to_string(t.id) + ".csv"));
    EXPECT_EQ(curve.size(), t.curve.size() + 1);
  }
  EXPECT_EQ(lines_of(dir / "convergence.csv").size(), r.evaluations.size() + 1);
  const auto rungs = lines_of(dir / "rungs.csv");
  EXPECT_EQ(rungs.size(), 1u + 3 + 2 + 1);  // header, then rungs of brackets s = 2, 1, 0
  const auto corr = lines_of(dir / "correlation.csv");
  EXPECT_EQ(corr[0], "feature,param,pearson_r,abs_r,importance_rank,degenerate,n");
  fs::remove_all(dir);
}

TEST(Report, SingleTrial) {
  const auto dir = fs::temp_directory_path() / ("mixres_sweep_one_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto space = SearchSpace::default_space();
  const auto r = hyperband(space, 1, 3, [](const Trial&, double) { return 0.3; });
  ASSERT_EQ(r.trials.size(), 1u);
  sweep_report(space, r, 1, 3, dir);
  EXPECT_EQ(lines_of(dir / "parallel_coordinates.csv").size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "curves" / "trial_0.csv"));
  EXPECT_EQ(lines_of(dir / "correlation.csv").size(), 1u);
  fs::remove_all(dir);
}

TEST(SpecFile, ParsesSectionsAndRoundTrips) {
  const auto spec = parse_sweep_spec(R"([sweep]
R = 27
eta = 3
seed = 5
val_size = 100

[param.lr]
type = continuous
scale = log
low = 0.001
high = 0.1

[param.batch_size]
type = categorical
values = 32, 64
)");
  EXPECT_EQ(spec.R, 27);
  EXPECT_EQ(spec.seed, 5u);
  EXPECT_EQ(spec.val_size, 100u);
  ASSERT_EQ(spec.space.params.size(), 2u);
  EXPECT_TRUE(spec.space.params[0].log_scale);
  EXPECT_EQ(spec.space.params[1].choices, (std::vector<std::string>{"32", "64"}));
  const auto again = parse_sweep_spec(to_ini(spec));
  EXPECT_EQ(to_ini(again), to_ini(spec));
  EXPECT_EQ(parse_sweep_spec("").space.params.size(), SearchSpace::default_space().params.size());
}

TEST(SpecFile, ErrorsNameTheKey) {
  auto message = [](const std::string& text) {
    try {
      parse_sweep_spec(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("[param.lr]\ntype = continuous\nlow = 0.1\nhigh = 0.01\n").find("param.lr"), std::string::npos);
  EXPECT_NE(message("[sweep]\nbogus = 1\n").find("sweep.bogus"), std::string::npos);
  EXPECT_NE(message("[sweep]\neta = 1\n").find("sweep.eta"), std::string::npos);
  EXPECT_NE(message("[param.x]\ntype = continuous\nlow = 1\n").find("param.x.high"), std::string::npos);
  EXPECT_NE(message("[param.x]\ntype = weird\n").find("param.x.type"), std::string::npos);
}

TEST(Tunables, ApplyConfig) {
  SampledConfig c{{{"lr", 0.01, "0.01"}, {"batch_size", 1, "64"}, {"mixup_alpha", 0.4, "0.4"}, {"mixup", 0, "false"}}};
  const auto t = apply_config(TrainConfig{}, c);
  EXPECT_EQ(t.lr, 0.01);
  EXPECT_EQ(t.batch_size, 64);
  EXPECT_EQ(t.mixup.alpha, 0.4);
  EXPECT_FALSE(t.mixup.enabled);
  EXPECT_THROW(check_tunable(SearchSpace{{ParamSpec::integer("depth", 1, 3)}}), ConfigError);
  EXPECT_NO_THROW(check_tunable(SearchSpace::default_space()));
  EXPECT_EQ(epochs_for(0.4), 1);
  EXPECT_EQ(epochs_for(3.0), 3);
}

TEST(TrainingObjective, ResumedTrialMatchesFreshRun) {
  const auto data = prepare_data(synthetic_dataset(32, 10, 1, 0.2f), synthetic_dataset(20, 10, 2, 0.2f));
  TrainConfig base;
  base.batch_size = 16;
  const ResNetConfig model{{1, 1, 1, 1}, 4, 10, Stem::Cifar, false};
  Trial t;
  t.id = 3;
  t.seed = 77;
  t.config.values = {{"lr", 0.02, "0.02"}};

  TrainingObjective staged(base, model, data, 3), fresh(base, model, data, 3);
  const double m1 = staged(t, 1);
  EXPECT_GE(m1, 0.0);
  EXPECT_LE(m1, 1.0);
  const double staged_m3 = staged(t, 3);
  const double fresh_m3 = fresh(t, 3);
  EXPECT_EQ(staged_m3, fresh_m3);
  staged.release(t.id);
  // After release the trial starts over, so a 1-epoch request repeats m1.
  EXPECT_EQ(staged(t, 1), m1);
}

TEST(TrainingObjective, SweepDataSplitsValidation) {
  const auto train = synthetic_dataset(50, 10, 1);
  const auto test = synthetic_dataset(20, 10, 2);
  SweepSpec spec;
  spec.val_size = 10;
  const auto d = sweep_data(train, test, spec);
  EXPECT_EQ(d.train.size(), 40u);
  EXPECT_EQ(d.test.size(), 10u);
  EXPECT_EQ(d.test.name, "validation");
  spec.on_test = true;
  EXPECT_EQ(sweep_data(train, test, spec).test.size(), 20u);
  spec.on_test = false;
  spec.val_size = 50;
  EXPECT_THROW(sweep_data(train, test, spec), ConfigError);
}
