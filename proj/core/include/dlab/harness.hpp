// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlab/datagen.hpp"
#include "dlab/distill.hpp"
#include "dlab/net.hpp"
#include "dlab/risk.hpp"

namespace dlab::harness {

// Relative error-rate reduction of a model against a baseline:
// (baseline - model) / baseline. Positive iff the model is better.
double werr(double baseline_error, double model_error);

// Recipe for the synthetic corpus. Sizes are quoted in desk-hours; one
// desk-hour is desk_hour_frames raw frames (the bookkeeping constant of
// 360,000 frames per full hour stays untouched, desk-hours just scale the
// experiment volume so whole studies run on a desk).
struct CorpusConfig {
  int num_states = 32;
  int feature_dim = 16;
  double self_loop_bias = 0.88;
  double mean_scale = 0.5;
  double stddev_min = 0.9;
  double stddev_max = 1.1;
  double next_state_weight = 0.7;
  std::uint64_t hmm_seed = 1;
  int min_frames = 80;
  int max_frames = 120;
  std::optional<int> num_utterances;  // default: sized from the hour requests
  double supervised_hours = 70.0;     // desk-hours
  double unsupervised_hours = 700.0;
  double test_hours = 30.0;
  double desk_hour_frames = 360.0;

  // desk-hours -> corpus bookkeeping hours (raw frames / 360000).
  double to_equivalent(double desk_hours) const {
    return desk_hours * desk_hour_frames / data::kFramesPerHour;
  }
  double from_equivalent(double hours) const {
    return hours * data::kFramesPerHour / desk_hour_frames;
  }
};

struct ArchConfig {
  std::vector<int> hidden;
  data::WindowSpec window;
  net::Activation activation = net::Activation::tanh;
};

struct DistillConfig {
  int k = 4;
  int quant_bits = 8;
  double temperature = 1.0;
  double lambda = 1.0;  // pure soft targets on unsupervised frames
  double min_confidence = 0.0;
  double max_fraction = 1.0;
  double sub_epoch_hours = 70.0;  // desk-hours per checkpoint chunk
  double initial_lr = 0.2;
  double decay_gamma = 0.9;
  int batch_size = 32;
};

struct GridLevel {
  double supervised_hours = 0.0;             // desk-hours
  std::vector<double> unsupervised_hours;    // desk-hours, ascending
};

struct GridConfig {
  std::vector<GridLevel> levels;
  double lambda = 0.5;
  bool warm_start = false;
  // Low-resource studies use a wide symmetric teacher and a student of the
  // same width with a causal window; empty means "copy the teacher widths".
  std::vector<int> teacher_hidden;
  std::vector<int> student_hidden;
};

struct SaturationConfig {
  std::vector<double> levels;  // desk-hours, ascending, >= 3 entries
};

// One declarative document drives every experiment; all randomness flows
// from `seed` and the per-run `seeds` list through named streams.
struct ExperimentConfig {
  int schema_version = 1;
  std::uint64_t seed = 1;
  unsigned jobs = 0;  // 0 = hardware default
  std::string out_dir = "results";
  CorpusConfig corpus;
  ArchConfig teacher_arch{{64, 64, 64, 64, 64}, {4, 4, 3}, net::Activation::tanh};
  ArchConfig assistant_arch{{32, 32, 32}, {4, 0, 3}, net::Activation::tanh};
  ArchConfig student_arch{{16, 16}, {4, 0, 3}, net::Activation::tanh};
  net::TrainSchedule train;  // supervised schedule; per-run seeds are derived
  DistillConfig distill;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  GridConfig grid;
  SaturationConfig saturation{{70.0, 140.0, 280.0, 560.0}};
  std::string takd_mode = "compare";  // "compare" or "chain"
};

net::ArchSpec make_arch(const ArchConfig& cfg, const std::string& name, int feature_dim,
                        int num_classes);

// Generate + split, deterministic in the config alone.
data::Corpus build_corpus(const ExperimentConfig& cfg);

// Stacks every utterance of a split (corpus order) into one labeled dataset.
net::Dataset stacked_labeled(const data::Corpus& corpus, data::Split split,
                             const data::WindowSpec& window);
// Same, but stops once max_hours (corpus bookkeeping hours) are reached;
// whole utterances only.
net::Dataset stacked_labeled_prefix(const data::Corpus& corpus, data::Split split,
                                    const data::WindowSpec& window, double max_hours);

struct CurvePoint {
  std::string model_name;
  std::uint64_t seed = 0;
  double supervised_hours = 0.0;    // desk-hours
  double unsupervised_hours = 0.0;  // desk-hours
  double frame_error = 0.0;
  double werr_vs_baseline = 0.0;
};

struct TeacherDot {
  std::uint64_t seed = 0;
  double supervised_hours = 0.0;
  double frame_error = 0.0;
  double werr_vs_baseline = 0.0;
};

struct SeedModels {
  std::uint64_t seed = 0;
  net::ModelParams baseline;
  net::ModelParams student;
};

struct CurveResult {
  std::vector<CurvePoint> points;
  std::vector<SeedModels> models;   // final models per seed
  std::vector<double> job_seconds;  // wall-clock per seed job
};

// Sub-epoch learning curve: per seed, trains a supervised-only baseline,
// distills the student from `teacher` in sub-epoch chunks, and evaluates
// every checkpoint on the test split. The teacher is shared across seeds;
// baselines are retrained per seed.
CurveResult subepoch_curve(const ExperimentConfig& cfg, const data::Corpus& corpus,
                           const net::ModelParams& teacher);

struct SaturationRow {
  double unsupervised_hours = 0.0;
  std::vector<double> seed_werr;
  double mean_werr = 0.0;
  std::optional<double> marginal_werr;  // vs the previous level
};

struct SaturationResult {
  std::vector<SaturationRow> rows;
  std::vector<CurvePoint> points;
  std::vector<double> job_seconds;  // wall-clock per seed job
};

// Ladder of unsupervised amounts; per level the student sees a prefix of the
// same teacher-labeled stream. Student stream seeds hash the level value, so
// identical levels reproduce identical results.
SaturationResult saturation_study(const ExperimentConfig& cfg, const data::Corpus& corpus);

struct ClassRiskReport {
  int target_class = 0;
  risk::RiskReport report;
};

// Risk analysis of one grid cell's (student, teacher) pair on the test set.
struct SbtSeedReport {
  std::uint64_t seed = 0;
  double student_frame_error = 0.0;
  double teacher_frame_error = 0.0;
  std::vector<ClassRiskReport> reports;
};

struct GridResult {
  std::vector<CurvePoint> points;
  std::vector<TeacherDot> dots;
  // One-vs-rest reports at the smallest supervised level with its largest
  // unsupervised amount (the student-beats-teacher regime), one per seed.
  double focus_supervised_hours = 0.0;
  double focus_unsupervised_hours = 0.0;
  std::vector<SbtSeedReport> focus_reports;
  std::vector<double> job_seconds;  // wall-clock per (level, seed) cell
};

// Low-resource study: per (supervised level, seed) trains a baseline and a
// symmetric-window teacher on the same supervised prefix, then students on
// growing unsupervised amounts; WERR per curve is against that curve's own
// baseline.
GridResult low_resource_grid(const ExperimentConfig& cfg, const data::Corpus& corpus);

// One-vs-rest risk reports per class; report.student_beats_teacher flags the
// classes where the threshold condition certifies student <= teacher risk.
std::vector<ClassRiskReport> student_beats_teacher_analysis(
    const net::ModelParams& student, const net::ModelParams& teacher,
    const Matrix& student_test_inputs, const Matrix& teacher_test_inputs,
    std::span<const std::int32_t> test_labels, std::span<const int> classes, unsigned jobs = 1);

}  // namespace dlab::harness
