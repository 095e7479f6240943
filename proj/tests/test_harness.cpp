// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "dlab/error.hpp"
#include "dlab/experiments.hpp"
#include "dlab/harness.hpp"
#include "dlab/io.hpp"

using namespace dlab;
using namespace dlab::harness;

namespace {

// Tiny desk: everything sized so a full study runs in a couple of seconds.
ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.seed = 9;
  cfg.jobs = 2;
  cfg.corpus.num_states = 8;
  cfg.corpus.feature_dim = 6;
  cfg.corpus.mean_scale = 0.7;
  cfg.corpus.min_frames = 40;
  cfg.corpus.max_frames = 60;
  cfg.corpus.desk_hour_frames = 120.0;
  cfg.corpus.supervised_hours = 6.0;
  cfg.corpus.unsupervised_hours = 20.0;
  cfg.corpus.test_hours = 5.0;
  cfg.teacher_arch = {{16, 16}, {2, 2, 2}, net::Activation::tanh};
  cfg.assistant_arch = {{10}, {2, 0, 2}, net::Activation::tanh};
  cfg.student_arch = {{8}, {2, 0, 2}, net::Activation::tanh};
  cfg.train.epochs = 5;
  cfg.train.initial_lr = 0.15;
  cfg.train.batch_size = 16;
  cfg.distill.k = 3;
  cfg.distill.sub_epoch_hours = 5.0;
  cfg.distill.initial_lr = 0.15;
  cfg.seeds = {1, 2};
  cfg.saturation.levels = {5.0, 10.0, 20.0};
  return cfg;
}

net::ModelParams quick_teacher(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  const net::ArchSpec arch =
      make_arch(cfg.teacher_arch, "teacher", cfg.corpus.feature_dim, cfg.corpus.num_states);
  net::TrainSchedule sched = cfg.train;
  sched.seed = 404;
  const net::Dataset sup = stacked_labeled(corpus, data::Split::supervised, arch.window);
  return net::train(net::init_params(arch, sched.seed), sup, sched).params;
}

}  // namespace

TEST_CASE("werr closed forms") {
  CHECK(werr(0.10, 0.05) == doctest::Approx(0.50).epsilon(1e-12));
  for (const double x : {0.01, 0.3, 0.97}) CHECK(werr(x, x) == 0.0);
  CHECK(werr(100.0, 85.7) == doctest::Approx(0.143).epsilon(1e-12));
  CHECK_THROWS_AS(werr(0.0, 0.1), NumericError);
}

TEST_CASE("corpus building honors the requested desk-hours") {
  const ExperimentConfig cfg = tiny_config();
  const data::Corpus corpus = build_corpus(cfg);
  const double sup = cfg.corpus.from_equivalent(corpus.hours_of(data::Split::supervised));
  const double unsup = cfg.corpus.from_equivalent(corpus.hours_of(data::Split::unsupervised));
  CHECK(sup >= cfg.corpus.supervised_hours);
  CHECK(sup < cfg.corpus.supervised_hours + 1.0);
  CHECK(unsup >= cfg.corpus.unsupervised_hours);
}

TEST_CASE("sub-epoch curve") {
  ExperimentConfig cfg = tiny_config();
  const data::Corpus corpus = build_corpus(cfg);
  const net::ModelParams teacher = quick_teacher(cfg, corpus);

  SUBCASE("chunk count follows total/sub_epoch and werr recomputes from errors") {
    const CurveResult result = subepoch_curve(cfg, corpus, teacher);
    for (const std::uint64_t s : cfg.seeds) {
      double baseline = -1.0;
      int student_points = 0;
      for (const auto& p : result.points) {
        if (p.seed != s) continue;
        if (p.model_name == "baseline") {
          baseline = p.frame_error;
          CHECK(p.werr_vs_baseline == 0.0);
          CHECK(p.unsupervised_hours == 0.0);
        } else {
          ++student_points;
        }
      }
      REQUIRE(baseline > 0.0);
      for (const auto& p : result.points) {
        if (p.seed == s && p.model_name == "student") {
          CHECK(std::abs(p.werr_vs_baseline - (baseline - p.frame_error) / baseline) < 1e-12);
        }
      }
      // 20+ desk-hours of unsupervised data in 5-hour chunks
      CHECK(student_points >= 4);
      CHECK(student_points <= 6);
    }
    CHECK(result.models.size() == cfg.seeds.size());
  }
  SUBCASE("zero unsupervised hours leaves a single self-baseline point per seed") {
    ExperimentConfig no_unsup = cfg;
    no_unsup.corpus.unsupervised_hours = 0.0;
    const data::Corpus small = build_corpus(no_unsup);
    const CurveResult result = subepoch_curve(no_unsup, small, teacher);
    CHECK(result.points.size() == no_unsup.seeds.size());
    for (const auto& p : result.points) {
      CHECK(p.model_name == "baseline");
      CHECK(p.werr_vs_baseline == 0.0);
    }
  }
}

TEST_CASE("saturation study") {
  ExperimentConfig cfg = tiny_config();
  const data::Corpus corpus = build_corpus(cfg);

  SUBCASE("row shape and marginals") {
    const SaturationResult result = saturation_study(cfg, corpus);
    REQUIRE(result.rows.size() == 3);
    CHECK_FALSE(result.rows[0].marginal_werr.has_value());
    for (std::size_t i = 1; i < result.rows.size(); ++i) {
      REQUIRE(result.rows[i].marginal_werr.has_value());
      CHECK(std::abs(*result.rows[i].marginal_werr -
                     (result.rows[i].mean_werr - result.rows[i - 1].mean_werr)) < 1e-12);
    }
    for (const auto& row : result.rows) CHECK(row.seed_werr.size() == cfg.seeds.size());
  }
  SUBCASE("identical levels give identical results") {
    ExperimentConfig repeated = cfg;
    repeated.saturation.levels = {10.0, 10.0, 20.0};
    const SaturationResult result = saturation_study(repeated, corpus);
    CHECK(result.rows[0].mean_werr == result.rows[1].mean_werr);
    CHECK(result.rows[0].seed_werr == result.rows[1].seed_werr);
    CHECK(*result.rows[1].marginal_werr == 0.0);
  }
  SUBCASE("fewer than three levels is rejected") {
    ExperimentConfig two = cfg;
    two.saturation.levels = {5.0, 10.0};
    CHECK_THROWS_AS(saturation_study(two, corpus), ConfigError);
  }
  SUBCASE("descending levels are rejected") {
    ExperimentConfig bad = cfg;
    bad.saturation.levels = {20.0, 10.0, 5.0};
    CHECK_THROWS_AS(saturation_study(bad, corpus), ConfigError);
  }
}

TEST_CASE("low-resource grid") {
  ExperimentConfig cfg = tiny_config();
  cfg.grid.levels = {{2.0, {0.0, 4.0}}, {4.0, {0.0, 4.0}}};
  cfg.grid.teacher_hidden = {16, 16};
  cfg.grid.student_hidden = {16, 16};
  const data::Corpus corpus = build_corpus(cfg);
  const GridResult result = low_resource_grid(cfg, corpus);

  SUBCASE("shape: one curve per level, one dot per (level, seed)") {
    CHECK(result.dots.size() == cfg.grid.levels.size() * cfg.seeds.size());
    CHECK(result.points.size() == cfg.grid.levels.size() * cfg.seeds.size() * 2);
    std::set<double> dot_levels;
    for (const auto& d : result.dots) dot_levels.insert(d.supervised_hours);
    CHECK(dot_levels == std::set<double>{2.0, 4.0});
  }
  SUBCASE("zero-unsupervised points sit on the self-baseline") {
    for (const auto& p : result.points) {
      if (p.unsupervised_hours == 0.0) CHECK(p.werr_vs_baseline == 0.0);
    }
  }
  SUBCASE("teacher dots line up with their level") {
    for (const auto& d : result.dots) {
      bool found = false;
      for (const auto& level : cfg.grid.levels) {
        if (level.supervised_hours == d.supervised_hours) found = true;
      }
      CHECK(found);
    }
  }
  SUBCASE("focus cell carries per-seed risk reports over every class") {
    CHECK(result.focus_supervised_hours == 2.0);
    CHECK(result.focus_unsupervised_hours == 4.0);
    REQUIRE(result.focus_reports.size() == cfg.seeds.size());
    for (const auto& sbt : result.focus_reports) {
      CHECK(sbt.reports.size() == static_cast<std::size_t>(cfg.corpus.num_states));
    }
  }
}

TEST_CASE("low-resource grid: six levels make six curves and six dot columns") {
  ExperimentConfig cfg = tiny_config();
  cfg.seeds = {1};
  cfg.grid.levels = {{1.0, {0.0}}, {2.0, {0.0}}, {3.0, {0.0}},
                     {4.0, {0.0}}, {5.0, {0.0}}, {6.0, {0.0}}};
  const data::Corpus corpus = build_corpus(cfg);
  const GridResult result = low_resource_grid(cfg, corpus);
  CHECK(result.dots.size() == 6);
  std::set<double> levels;
  for (const auto& p : result.points) levels.insert(p.supervised_hours);
  CHECK(levels.size() == 6);
}

TEST_CASE("training on generated corpora keeps the loss trace finite") {
  const ExperimentConfig cfg = tiny_config();
  const data::Corpus corpus = build_corpus(cfg);
  const net::ArchSpec arch =
      make_arch(cfg.student_arch, "student", cfg.corpus.feature_dim, cfg.corpus.num_states);
  net::TrainSchedule sched;  // the default twelve-epoch schedule
  sched.seed = 88;
  const net::Dataset sup = stacked_labeled(corpus, data::Split::supervised, arch.window);
  const auto trained = net::train(net::init_params(arch, sched.seed), sup, sched);
  REQUIRE(trained.loss_trace.size() == 12);
  for (const double loss : trained.loss_trace) CHECK(std::isfinite(loss));
}

TEST_CASE("student-beats-teacher analysis: identical models certify equality") {
  const ExperimentConfig cfg = tiny_config();
  const data::Corpus corpus = build_corpus(cfg);
  const net::ModelParams teacher = quick_teacher(cfg, corpus);
  const net::Dataset test = stacked_labeled(corpus, data::Split::test, teacher.arch.window);
  std::vector<std::int32_t> labels;
  for (std::size_t i = 0; i < test.size(); ++i) labels.push_back(test.targets.classes_of(i)[0]);
  const std::vector<int> classes{0, 1, 2, 3, 4, 5, 6, 7};

  const auto reports = student_beats_teacher_analysis(teacher, teacher, test.inputs, test.inputs,
                                                      labels, classes);
  REQUIRE(reports.size() == classes.size());
  for (const auto& r : reports) {
    CHECK(r.report.r_student == r.report.r_teacher);
    CHECK(r.report.student_beats_teacher);
  }
}

TEST_CASE("experiment runners write byte-identical artifacts on rerun") {
  ExperimentConfig cfg = tiny_config();
  const auto base = std::filesystem::temp_directory_path() / "dlab_test_rerun";
  std::filesystem::remove_all(base);

  experiments::run_curve(cfg, base / "a");
  // Rerun from the manifest alone.
  const auto from_manifest = experiments::load_config(base / "a" / "manifest.json");
  CHECK(experiments::config_hash(from_manifest) == experiments::config_hash(cfg));
  experiments::run_curve(from_manifest, base / "b");

  for (const char* name : {"curve_points.csv", "student_seed1.ckpt", "student_seed2.ckpt"}) {
    CHECK(read_file(base / "a" / name) == read_file(base / "b" / name));
  }
  std::filesystem::remove_all(base);
}

TEST_CASE("config document round trip, overrides and unknown keys") {
  const ExperimentConfig cfg = tiny_config();
  const auto dir = std::filesystem::temp_directory_path() / "dlab_test_cfg";
  std::filesystem::create_directories(dir);
  atomic_write_file(dir / "cfg.json", experiments::config_json(cfg));

  const ExperimentConfig loaded = experiments::load_config(dir / "cfg.json");
  CHECK(experiments::config_hash(loaded) == experiments::config_hash(cfg));

  const ExperimentConfig overridden =
      experiments::load_config(dir / "cfg.json", {"train.initial_lr=0.33", "seeds=[7,8]"});
  CHECK(overridden.train.initial_lr == 0.33);
  CHECK(overridden.seeds == std::vector<std::uint64_t>{7, 8});
  CHECK(experiments::config_hash(overridden) != experiments::config_hash(cfg));

  atomic_write_file(dir / "bad.json", std::string("{\"train\": {\"leraning_rate\": 0.1}}"));
  CHECK_THROWS_WITH_AS(experiments::load_config(dir / "bad.json"),
                       doctest::Contains("leraning_rate"), ConfigError);
  std::filesystem::remove_all(dir);
}
