// SPDX-License-Identifier: Apache-2.0
#include "dlab/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "dlab/error.hpp"
#include "dlab/parallel.hpp"
#include "dlab/rng.hpp"

namespace dlab::harness {

namespace {

net::TrainSchedule derived_schedule(const net::TrainSchedule& base, std::uint64_t seed) {
  net::TrainSchedule s = base;
  s.seed = seed;
  return s;
}

net::TrainSchedule distill_schedule(const DistillConfig& d, int epochs, std::uint64_t seed) {
  net::TrainSchedule s;
  s.epochs = epochs;
  s.initial_lr = d.initial_lr;
  s.decay_gamma = d.decay_gamma;
  s.batch_size = d.batch_size;
  s.seed = seed;
  return s;
}

distill::SelectionPolicy policy_of(const DistillConfig& d) {
  return {d.min_confidence, d.max_fraction};
}

struct EvalSets {
  net::Dataset student_view;
  net::Dataset teacher_view;
};

}  // namespace

double werr(double baseline_error, double model_error) {
  if (!(baseline_error > 0.0))
    throw NumericError("werr: baseline error must be > 0 (got " +
                       std::to_string(baseline_error) + ")");
  if (model_error < 0.0) throw NumericError("werr: model error must be >= 0");
  return (baseline_error - model_error) / baseline_error;
}

net::ArchSpec make_arch(const ArchConfig& cfg, const std::string& name, int feature_dim,
                        int num_classes) {
  net::ArchSpec arch;
  arch.window = cfg.window;
  arch.feature_dim = feature_dim;
  arch.hidden_layers = cfg.hidden;
  arch.num_classes = num_classes;
  arch.activation = cfg.activation;
  arch.name = name;
  net::validate(arch);
  return arch;
}

data::Corpus build_corpus(const ExperimentConfig& cfg) {
  const CorpusConfig& c = cfg.corpus;
  const data::HmmSpec spec =
      data::make_hmm(c.num_states, c.feature_dim, c.self_loop_bias, c.mean_scale, c.stddev_min,
                     c.stddev_max, c.next_state_weight, c.hmm_seed);
  const double total_desk = c.supervised_hours + c.unsupervised_hours + c.test_hours;
  const double total_frames = total_desk * c.desk_hour_frames;
  int n = c.num_utterances.value_or(
      static_cast<int>(std::ceil(total_frames / static_cast<double>(c.min_frames))) + 1);
  if (n < 1) n = 1;
  const unsigned jobs = cfg.jobs == 0 ? default_jobs() : cfg.jobs;
  const data::Corpus raw = data::generate_corpus(spec, n, {c.min_frames, c.max_frames},
                                                 derive_stream(cfg.seed, "corpus"), jobs);
  return data::split_corpus(raw, c.to_equivalent(c.supervised_hours),
                            c.to_equivalent(c.unsupervised_hours),
                            c.to_equivalent(c.test_hours), derive_stream(cfg.seed, "split"));
}

net::Dataset stacked_labeled(const data::Corpus& corpus, data::Split split,
                             const data::WindowSpec& window) {
  return stacked_labeled_prefix(corpus, split, window,
                                std::numeric_limits<double>::infinity());
}

net::Dataset stacked_labeled_prefix(const data::Corpus& corpus, data::Split split,
                                    const data::WindowSpec& window, double max_hours) {
  const std::vector<std::size_t> idx = corpus.split_indices(split);
  std::vector<Matrix> stacked;
  std::vector<std::vector<std::int32_t>> labels;
  std::size_t total_rows = 0;
  double achieved = 0.0;
  for (const std::size_t i : idx) {
    if (achieved + 1e-12 >= max_hours) break;
    const auto maybe_labels = corpus.labels(i);
    if (!maybe_labels.has_value())
      throw DataError("stacked_labeled: split '" + data::to_string(split) +
                      "' has no trainer-visible labels");
    const Matrix s = data::stack_inputs(corpus.frames(i), window);
    const auto centers = data::kept_centers(static_cast<std::int64_t>(corpus.frames(i).rows),
                                            window.subsample_factor);
    std::vector<std::int32_t> l;
    l.reserve(centers.size());
    for (const std::int32_t c : centers) l.push_back((*maybe_labels)[static_cast<std::size_t>(c)]);
    total_rows += s.rows;
    achieved += static_cast<double>(corpus.frames(i).rows) / data::kFramesPerHour;
    stacked.push_back(std::move(s));
    labels.push_back(std::move(l));
  }
  if (stacked.empty()) {
    net::Dataset empty;
    empty.inputs = Matrix(0, static_cast<std::size_t>(window.stacked_dim(corpus.spec().feature_dim)));
    return empty;
  }
  Matrix inputs(total_rows, stacked.front().cols);
  std::vector<std::int32_t> all_labels;
  all_labels.reserve(total_rows);
  std::size_t row = 0;
  for (std::size_t b = 0; b < stacked.size(); ++b) {
    std::copy(stacked[b].data.begin(), stacked[b].data.end(), inputs.row(row));
    row += stacked[b].rows;
    all_labels.insert(all_labels.end(), labels[b].begin(), labels[b].end());
  }
  return net::make_labeled(std::move(inputs), all_labels);
}

CurveResult subepoch_curve(const ExperimentConfig& cfg, const data::Corpus& corpus,
                           const net::ModelParams& teacher) {
  const unsigned jobs = cfg.jobs == 0 ? default_jobs() : cfg.jobs;
  const int classes = corpus.spec().num_states;
  const net::ArchSpec student_arch =
      make_arch(cfg.student_arch, "student", corpus.spec().feature_dim, classes);

  const net::Dataset sup = stacked_labeled(corpus, data::Split::supervised, student_arch.window);
  const net::Dataset test = stacked_labeled(corpus, data::Split::test, student_arch.window);
  if (test.empty()) throw DataError("subepoch_curve: empty test split");

  // The teacher is fixed, so its labeling pass is shared by all seeds.
  const distill::SoftTargetBatch soft =
      distill::teacher_label(teacher, corpus, policy_of(cfg.distill), cfg.distill.k,
                             cfg.distill.quant_bits, cfg.distill.temperature, jobs);
  const double sub_epoch_eq = cfg.corpus.to_equivalent(cfg.distill.sub_epoch_hours);

  struct SeedSlot {
    std::vector<CurvePoint> points;
    SeedModels models;
    double seconds = 0.0;
  };
  std::vector<SeedSlot> per_seed(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), jobs, [&](std::size_t si) {
    const auto job_start = std::chrono::steady_clock::now();
    const std::uint64_t s = cfg.seeds[si];
    auto& slot = per_seed[si];
    slot.models.seed = s;

    const auto baseline_sched = derived_schedule(cfg.train, derive_stream(s, "curve_baseline"));
    auto baseline =
        net::train(net::init_params(student_arch, baseline_sched.seed), sup, baseline_sched);
    const double b = net::frame_error_rate(baseline.params, test);
    slot.points.push_back({"baseline", s, cfg.corpus.supervised_hours, 0.0, b, 0.0});
    slot.models.baseline = std::move(baseline.params);
    if (soft.empty()) {
      slot.models.student = slot.models.baseline;
      slot.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - job_start).count();
      return;
    }

    const auto student_sched = distill_schedule(cfg.distill, cfg.train.epochs,
                                                derive_stream(s, "curve_student"));
    auto result =
        distill::train_student(student_arch, sup, soft, corpus, {cfg.distill.lambda},
                               student_sched, sub_epoch_eq);
    for (const auto& ckpt : result.checkpoints) {
      const double e = net::frame_error_rate(ckpt.params, test);
      slot.points.push_back({"student", s, cfg.corpus.supervised_hours,
                             cfg.corpus.from_equivalent(ckpt.cumulative_unsup_hours), e,
                             werr(b, e)});
    }
    slot.models.student = std::move(result.params);
    slot.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - job_start).count();
  });

  CurveResult result;
  for (auto& slot : per_seed) {
    result.points.insert(result.points.end(), slot.points.begin(), slot.points.end());
    result.models.push_back(std::move(slot.models));
    result.job_seconds.push_back(slot.seconds);
  }
  return result;
}

SaturationResult saturation_study(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  const auto& levels = cfg.saturation.levels;
  if (levels.size() < 3)
    throw ConfigError("saturation.levels: need at least 3 unsupervised levels");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (levels[i] < levels[i - 1])
      throw ConfigError("saturation.levels: levels must be ascending");
  }
  const double unsup_avail = cfg.corpus.from_equivalent(corpus.hours_of(data::Split::unsupervised));
  if (levels.back() > unsup_avail + 1e-9)
    throw ConfigError("saturation.levels: largest level exceeds the unsupervised split (" +
                      std::to_string(unsup_avail) + " desk-hours available)");
  const unsigned jobs = cfg.jobs == 0 ? default_jobs() : cfg.jobs;
  const int classes = corpus.spec().num_states;
  const net::ArchSpec student_arch =
      make_arch(cfg.student_arch, "student", corpus.spec().feature_dim, classes);
  const net::ArchSpec teacher_arch =
      make_arch(cfg.teacher_arch, "teacher", corpus.spec().feature_dim, classes);

  const net::Dataset sup_student = stacked_labeled(corpus, data::Split::supervised, student_arch.window);
  const net::Dataset sup_teacher = stacked_labeled(corpus, data::Split::supervised, teacher_arch.window);
  const net::Dataset test = stacked_labeled(corpus, data::Split::test, student_arch.window);
  if (test.empty()) throw DataError("saturation_study: empty test split");
  const double sub_epoch_eq = cfg.corpus.to_equivalent(cfg.distill.sub_epoch_hours);

  // werr_by[seed][level]
  std::vector<std::vector<double>> werr_by(cfg.seeds.size(),
                                           std::vector<double>(levels.size(), 0.0));
  std::vector<std::vector<double>> fer_by = werr_by;
  std::vector<double> job_seconds(cfg.seeds.size(), 0.0);
  parallel_for(cfg.seeds.size(), jobs, [&](std::size_t si) {
    const auto job_start = std::chrono::steady_clock::now();
    const std::uint64_t s = cfg.seeds[si];
    const auto baseline_sched = derived_schedule(cfg.train, derive_stream(s, "sat_baseline"));
    const auto baseline =
        net::train(net::init_params(student_arch, baseline_sched.seed), sup_student, baseline_sched);
    const double b = net::frame_error_rate(baseline.params, test);

    const auto teacher_sched = derived_schedule(cfg.train, derive_stream(s, "sat_teacher"));
    const auto teacher =
        net::train(net::init_params(teacher_arch, teacher_sched.seed), sup_teacher, teacher_sched);
    const auto soft_full =
        distill::teacher_label(teacher.params, corpus, policy_of(cfg.distill), cfg.distill.k,
                               cfg.distill.quant_bits, cfg.distill.temperature);

    for (std::size_t li = 0; li < levels.size(); ++li) {
      const auto soft = distill::truncate_by_hours(soft_full, cfg.corpus.to_equivalent(levels[li]));
      // Hash the level value (not its index) into the stream so identical
      // levels reproduce identical students.
      const auto student_sched = distill_schedule(
          cfg.distill, cfg.train.epochs,
          derive_stream(s, "sat_student", std::bit_cast<std::uint64_t>(levels[li])));
      const auto result = distill::train_student(student_arch, sup_student, soft, corpus,
                                                 {cfg.distill.lambda}, student_sched, sub_epoch_eq);
      const double e = net::frame_error_rate(result.params, test);
      fer_by[si][li] = e;
      werr_by[si][li] = werr(b, e);
    }
    job_seconds[si] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - job_start).count();
  });

  SaturationResult out;
  out.job_seconds = std::move(job_seconds);
  for (std::size_t li = 0; li < levels.size(); ++li) {
    SaturationRow row;
    row.unsupervised_hours = levels[li];
    double sum = 0.0;
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      row.seed_werr.push_back(werr_by[si][li]);
      sum += werr_by[si][li];
      out.points.push_back({"student", cfg.seeds[si], cfg.corpus.supervised_hours, levels[li],
                            fer_by[si][li], werr_by[si][li]});
    }
    row.mean_werr = sum / static_cast<double>(cfg.seeds.size());
    if (li > 0) row.marginal_werr = row.mean_werr - out.rows.back().mean_werr;
    out.rows.push_back(std::move(row));
  }
  return out;
}

GridResult low_resource_grid(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  if (cfg.grid.levels.empty()) throw ConfigError("grid.levels: must not be empty");
  const unsigned jobs = cfg.jobs == 0 ? default_jobs() : cfg.jobs;
  const int classes = corpus.spec().num_states;
  const int d = corpus.spec().feature_dim;

  ArchConfig teacher_cfg = cfg.teacher_arch;
  if (!cfg.grid.teacher_hidden.empty()) teacher_cfg.hidden = cfg.grid.teacher_hidden;
  ArchConfig student_cfg = teacher_cfg;
  student_cfg.hidden = cfg.grid.student_hidden.empty() ? teacher_cfg.hidden : cfg.grid.student_hidden;
  student_cfg.window.right_context = 0;  // causal student, teacher-width by default
  const net::ArchSpec teacher_arch = make_arch(teacher_cfg, "grid-teacher", d, classes);
  const net::ArchSpec student_arch = make_arch(student_cfg, "grid-student", d, classes);

  const double sup_avail = cfg.corpus.from_equivalent(corpus.hours_of(data::Split::supervised));
  const double unsup_avail = cfg.corpus.from_equivalent(corpus.hours_of(data::Split::unsupervised));
  for (const GridLevel& level : cfg.grid.levels) {
    if (level.supervised_hours > sup_avail + 1e-9)
      throw ConfigError("grid: supervised level exceeds the supervised split");
    for (const double u : level.unsupervised_hours) {
      if (u > unsup_avail + 1e-9)
        throw ConfigError("grid: unsupervised amount exceeds the unsupervised split");
    }
  }

  const net::Dataset test_student = stacked_labeled(corpus, data::Split::test, student_arch.window);
  const net::Dataset test_teacher = stacked_labeled(corpus, data::Split::test, teacher_arch.window);
  if (test_student.empty()) throw DataError("low_resource_grid: empty test split");
  std::vector<std::int32_t> test_labels;
  test_labels.reserve(test_student.size());
  for (std::size_t i = 0; i < test_student.size(); ++i) {
    test_labels.push_back(test_student.targets.classes_of(i)[0]);
  }

  // The smallest supervised level with its largest unsupervised amount is
  // the regime where students overtake teachers; grid runs analyze it.
  std::size_t focus_level = 0;
  for (std::size_t li = 1; li < cfg.grid.levels.size(); ++li) {
    if (cfg.grid.levels[li].supervised_hours <
        cfg.grid.levels[focus_level].supervised_hours) {
      focus_level = li;
    }
  }
  double focus_unsup = 0.0;
  for (const double u : cfg.grid.levels[focus_level].unsupervised_hours) {
    focus_unsup = std::max(focus_unsup, u);
  }

  struct Cell {
    std::vector<CurvePoint> points;
    TeacherDot dot;
    std::optional<SbtSeedReport> sbt;
    double seconds = 0.0;
  };
  const std::size_t num_cells = cfg.grid.levels.size() * cfg.seeds.size();
  std::vector<Cell> cells(num_cells);
  parallel_for(num_cells, jobs, [&](std::size_t ci) {
    const auto job_start = std::chrono::steady_clock::now();
    const std::size_t li = ci / cfg.seeds.size();
    const std::size_t si = ci % cfg.seeds.size();
    const GridLevel& level = cfg.grid.levels[li];
    const std::uint64_t s = cfg.seeds[si];
    Cell& cell = cells[ci];

    const double level_eq = cfg.corpus.to_equivalent(level.supervised_hours);
    const net::Dataset sup_student =
        stacked_labeled_prefix(corpus, data::Split::supervised, student_arch.window, level_eq);
    const net::Dataset sup_teacher =
        stacked_labeled_prefix(corpus, data::Split::supervised, teacher_arch.window, level_eq);
    if (sup_student.empty())
      throw ConfigError("grid: supervised level " + std::to_string(level.supervised_hours) +
                        " desk-hours selects no utterances");

    const auto baseline_sched =
        derived_schedule(cfg.train, derive_stream(s, "grid_baseline", li));
    const auto baseline =
        net::train(net::init_params(student_arch, baseline_sched.seed), sup_student, baseline_sched);
    const double b = net::frame_error_rate(baseline.params, test_student);

    const auto teacher_sched = derived_schedule(cfg.train, derive_stream(s, "grid_teacher", li));
    const auto teacher =
        net::train(net::init_params(teacher_arch, teacher_sched.seed), sup_teacher, teacher_sched);
    const double t = net::frame_error_rate(teacher.params, test_teacher);
    cell.dot = {s, level.supervised_hours, t, werr(b, t)};

    std::optional<distill::SoftTargetBatch> soft_full;
    for (const double u : level.unsupervised_hours) {
      if (u <= 0.0) {
        cell.points.push_back({"student", s, level.supervised_hours, 0.0, b, 0.0});
        continue;
      }
      if (!soft_full.has_value()) {
        soft_full = distill::teacher_label(teacher.params, corpus, policy_of(cfg.distill),
                                           cfg.distill.k, cfg.distill.quant_bits,
                                           cfg.distill.temperature);
      }
      const auto soft = distill::truncate_by_hours(*soft_full, cfg.corpus.to_equivalent(u));
      const auto student_sched =
          distill_schedule(cfg.distill, cfg.train.epochs,
                           derive_stream(s, "grid_student", li, std::bit_cast<std::uint64_t>(u)));
      std::optional<net::ModelParams> warm;
      if (cfg.grid.warm_start) warm = baseline.params;
      const auto result =
          distill::train_student(student_arch, sup_student, soft, corpus, {cfg.grid.lambda},
                                 student_sched, cfg.corpus.to_equivalent(u), warm);
      const double e = net::frame_error_rate(result.params, test_student);
      cell.points.push_back({"student", s, level.supervised_hours, u, e, werr(b, e)});

      if (li == focus_level && u == focus_unsup) {
        std::vector<int> all_classes(static_cast<std::size_t>(classes));
        std::iota(all_classes.begin(), all_classes.end(), 0);
        SbtSeedReport sbt;
        sbt.seed = s;
        sbt.student_frame_error = e;
        sbt.teacher_frame_error = t;
        sbt.reports = student_beats_teacher_analysis(result.params, teacher.params,
                                                     test_student.inputs, test_teacher.inputs,
                                                     test_labels, all_classes);
        cell.sbt = std::move(sbt);
      }
    }
    cell.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - job_start).count();
  });

  GridResult out;
  out.focus_supervised_hours = cfg.grid.levels[focus_level].supervised_hours;
  out.focus_unsupervised_hours = focus_unsup;
  for (Cell& cell : cells) {
    out.points.insert(out.points.end(), cell.points.begin(), cell.points.end());
    out.dots.push_back(cell.dot);
    if (cell.sbt.has_value()) out.focus_reports.push_back(std::move(*cell.sbt));
    out.job_seconds.push_back(cell.seconds);
  }
  return out;
}

std::vector<ClassRiskReport> student_beats_teacher_analysis(
    const net::ModelParams& student, const net::ModelParams& teacher,
    const Matrix& student_test_inputs, const Matrix& teacher_test_inputs,
    std::span<const std::int32_t> test_labels, std::span<const int> classes, unsigned jobs) {
  if (test_labels.empty()) throw DataError("student_beats_teacher_analysis: empty test split");
  std::vector<ClassRiskReport> reports;
  reports.reserve(classes.size());
  for (const int cls : classes) {
    const risk::BinarizedRun run = risk::binarize_run(student, teacher, student_test_inputs,
                                                      teacher_test_inputs, test_labels, cls, jobs);
    reports.push_back({cls, risk::truth_over_teacher(run.teacher, run.student, run.samples)});
  }
  return reports;
}

}  // namespace dlab::harness
