// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dlab/harness.hpp"
#include "dlab/takd.hpp"

namespace dlab::experiments {

// Parses the hierarchical JSON config. Unknown keys anywhere in the document
// are hard errors naming the offending path; `origin` (usually the file
// path) prefixes every error message. Overrides are dotted key=value pairs
// applied before validation, values parsed as JSON scalars when possible.
harness::ExperimentConfig config_from_json_text(const std::string& text,
                                                const std::string& origin);
harness::ExperimentConfig load_config(const std::filesystem::path& path,
                                      const std::vector<std::string>& overrides = {});

// Full resolved config as canonical JSON (sorted keys, every field explicit).
std::string config_json(const harness::ExperimentConfig& cfg);
std::string config_hash(const harness::ExperimentConfig& cfg);

// Manifest written next to every experiment's outputs. A manifest doubles as
// a config: load_config accepts it and reads the embedded "config" object
// (its hash is verified), so any run is reproducible from its manifest
// alone. Timings carry the total wall-clock plus per-job seconds.
void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                    const harness::ExperimentConfig& cfg, const std::string& corpus_hash,
                    const std::vector<std::string>& outputs, double seconds,
                    const std::vector<double>& job_seconds = {});

// Experiment runners: build the corpus from the config, run the study and
// write deterministic CSV artifacts plus a manifest under out_dir.
harness::CurveResult run_curve(const harness::ExperimentConfig& cfg,
                               const std::filesystem::path& out_dir);
harness::SaturationResult run_saturation(const harness::ExperimentConfig& cfg,
                                         const std::filesystem::path& out_dir);

// The grid result carries its focus-cell risk analysis (smallest supervised
// level, largest unsupervised amount) in focus_reports.
harness::GridResult run_grid(const harness::ExperimentConfig& cfg,
                             const std::filesystem::path& out_dir);

takd::CompareResult run_takd_compare(const harness::ExperimentConfig& cfg,
                                     const std::filesystem::path& out_dir);
takd::ChainResult run_takd_chain(const harness::ExperimentConfig& cfg,
                                 const std::filesystem::path& out_dir);

// Corpus generation + persistence ("gen-data").
std::string run_gen_data(const harness::ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir);

// Supervised training of one named model ("train"); writes checkpoint and
// metrics.json, returns the test frame error.
double run_train(const harness::ExperimentConfig& cfg, const std::string& model,
                 const std::filesystem::path& out_dir);

// Teacher -> soft targets -> student with sub-epoch checkpoints ("distill").
harness::CurveResult run_distill(const harness::ExperimentConfig& cfg,
                                 const std::filesystem::path& out_dir);

// Aggregates manifests under results_dir: prints per-experiment summaries,
// flags incomplete output sets, writes combined.csv. Throws DataError when
// the directory has no manifests or a manifest fails to parse.
void report_results(const std::filesystem::path& results_dir, std::ostream& out);

// CSV snapshots (also used by the determinism checks).
std::string curve_points_csv(const std::vector<harness::CurvePoint>& points);
std::string teacher_dots_csv(const std::vector<harness::TeacherDot>& dots);
std::string saturation_summary_csv(const harness::SaturationResult& result);

}  // namespace dlab::experiments
