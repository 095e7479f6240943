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

namespace dlab::takd {

// Settings for one distillation link (stage i labels, stage i+1 trains).
struct LinkSettings {
  int k = 4;
  int quant_bits = 8;
  double temperature = 1.0;
  distill::MixWeight mix{1.0};  // links run on pure soft targets by default
  distill::SelectionPolicy policy;
  net::TrainSchedule schedule;
  double sub_epoch_hours = 0.0;  // corpus bookkeeping hours; 0 = one chunk
  data::Split source_split = data::Split::unsupervised;
};

// Ordered capacity ladder: first stage the teacher (hard-label trained), each
// later stage distilled from its predecessor. Capacities must decrease
// strictly along the chain.
struct DistillChain {
  std::vector<net::ArchSpec> stages;
  net::TrainSchedule stage0_schedule;
  std::vector<LinkSettings> links;  // one per adjacent stage pair
  // Error the per-stage WERR is computed against; when absent, stage 0's
  // test frame error is the declared baseline.
  std::optional<double> baseline_error;
};

void validate(const DistillChain& chain);

struct StageResult {
  std::string name;
  std::int64_t params = 0;
  double frame_error = 0.0;
  double werr_vs_baseline = 0.0;
  double seconds = 0.0;
  net::ModelParams model;
};

struct ChainResult {
  std::vector<StageResult> stages;
  std::string baseline_name;
  double baseline_error = 0.0;
};

// Hard-label training of the chain head; delegates to net::train.
net::ModelParams train_teacher(const net::ArchSpec& arch, const net::Dataset& supervised,
                               const net::TrainSchedule& schedule);

// Stage 0 trains on the supervised split; each link labels its source split
// with the previous stage and trains the next via distill::train_student.
// A 2-stage chain is exactly direct knowledge distillation.
ChainResult run_chain(const DistillChain& chain, const data::Corpus& corpus, unsigned jobs = 1);

// CSV with one row per stage: stage,params,frame_error,werr_vs_baseline,seconds.
std::string chain_result_csv(const ChainResult& result);
std::string chain_result_json(const ChainResult& result);

struct CompareSettings {
  LinkSettings link;                 // shared by every distillation pass
  net::TrainSchedule supervised;     // baseline + teacher schedule
};

struct CompareResult {
  std::vector<std::uint64_t> seeds;
  std::vector<double> baseline_fer;  // per seed
  std::vector<double> kd_werr;
  std::vector<double> takd_werr;
  double baseline_mean_fer = 0.0;
  double kd_mean_werr = 0.0;
  double takd_mean_werr = 0.0;
  std::vector<double> job_seconds;  // wall-clock per seed job
  std::string note;  // set when the configuration is degenerate
};

// Per seed: (a) hard-label baseline student, (b) direct-KD student,
// (c) TAKD student through the assistant; WERR of (b) and (c) against (a).
// Students share the initialization stream within a seed, so the comparison
// isolates the training targets. An assistant at (or above) teacher capacity
// is allowed here but flagged in `note` as degenerate.
CompareResult compare_kd_takd(const data::Corpus& corpus, const net::ArchSpec& teacher_arch,
                              const net::ArchSpec& assistant_arch,
                              const net::ArchSpec& student_arch, const CompareSettings& settings,
                              std::span<const std::uint64_t> seeds, unsigned jobs = 1);

// 3 rows (baseline_fer, kd_werr, takd_werr) x seeds, plus a mean column.
std::string compare_result_csv(const CompareResult& result);

}  // namespace dlab::takd
