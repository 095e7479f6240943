// SPDX-License-Identifier: Apache-2.0
//
// dlab: synthetic frame-classification laboratory for teacher-student
// training. One subcommand per study; every run writes a manifest that can
// be fed back through --config to reproduce it exactly.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dlab/error.hpp"
#include "dlab/experiments.hpp"
#include "dlab/io.hpp"
#include "dlab/parallel.hpp"
#include "dlab/risk.hpp"

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  unsigned jobs = 0;
  bool jobs_set = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* config = cmd->add_option("--config", args.config_path, "Experiment config (JSON)");
  if (config_required) config->required();
  cmd->add_option("--out", args.out_dir, "Output directory (default: config out_dir)");
  cmd->add_option("--seed", args.seed, "Top-level seed override")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--jobs", args.jobs, "Concurrent jobs (0 = hardware default)")
      ->each([&args](const std::string&) { args.jobs_set = true; });
  cmd->add_option("--override", args.overrides, "Config override key=value (repeatable)");
}

std::string g_active_config;  // names the config in error reports

dlab::harness::ExperimentConfig resolve_config(const CommonArgs& args) {
  g_active_config = args.config_path;
  auto cfg = dlab::experiments::load_config(args.config_path, args.overrides);
  if (args.seed_set) cfg.seed = args.seed;
  if (args.jobs_set) cfg.jobs = args.jobs;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

// Errors raised after parsing may not carry the config path; attach it.
std::string with_config_context(const std::string& msg) {
  if (g_active_config.empty() || msg.find(g_active_config) != std::string::npos) return msg;
  return msg + " (config: " + g_active_config + ")";
}

fs::path out_of(const dlab::harness::ExperimentConfig& cfg, const std::string& sub) {
  return fs::path(cfg.out_dir) / sub;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlab: teacher-student distillation laboratory on synthetic frame data"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, distill_args, takd_args, curve_args, grid_args, sat_args;
  std::string train_model = "teacher";
  int verify_n = 6;
  std::string report_dir;

  auto* gen = app.add_subcommand("gen-data", "Generate and persist a synthetic corpus");
  add_common(gen, gen_args);

  auto* train = app.add_subcommand("train", "Supervised training of one model");
  add_common(train, train_args);
  train->add_option("--model", train_model, "teacher|assistant|student (default teacher)");

  auto* dist = app.add_subcommand("distill", "Teacher soft targets + student training");
  add_common(dist, distill_args);

  auto* takd = app.add_subcommand("takd", "Direct KD vs step-wise teacher-assistant KD");
  add_common(takd, takd_args);

  auto* verify = app.add_subcommand("risk-verify", "Exhaustive check of the risk identities");
  verify->add_option("--n", verify_n, "Sample-set size (1..8, default 6)");

  auto* curve = app.add_subcommand("curve", "Sub-epoch learning curve study");
  add_common(curve, curve_args);

  auto* grid = app.add_subcommand("grid", "Low-resource supervised x unsupervised grid");
  add_common(grid, grid_args);

  auto* sat = app.add_subcommand("saturation", "Unsupervised-data saturation ladder");
  add_common(sat, sat_args);

  auto* report = app.add_subcommand("report", "Aggregate experiment results");
  report->add_option("results_dir", report_dir, "Directory with experiment manifests")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(gen_args);
      const std::string hash = dlab::experiments::run_gen_data(cfg, out_of(cfg, "gen-data"));
      std::cout << "corpus_hash=" << hash << "\n";
    } else if (train->parsed()) {
      const auto cfg = resolve_config(train_args);
      const double fer = dlab::experiments::run_train(cfg, train_model, out_of(cfg, "train-" + train_model));
      std::cout << "model=" << train_model << " frame_error=" << dlab::fmt_double(fer) << "\n";
    } else if (dist->parsed()) {
      const auto cfg = resolve_config(distill_args);
      const auto result = dlab::experiments::run_distill(cfg, out_of(cfg, "distill"));
      std::cout << "points=" << result.points.size() << "\n";
    } else if (takd->parsed()) {
      const auto cfg = resolve_config(takd_args);
      if (cfg.takd_mode == "chain") {
        const auto result = dlab::experiments::run_takd_chain(cfg, out_of(cfg, "takd"));
        for (const auto& stage : result.stages) {
          std::cout << "stage=" << stage.name << " params=" << stage.params
                    << " frame_error=" << dlab::fmt_double(stage.frame_error)
                    << " werr=" << dlab::fmt_double(stage.werr_vs_baseline) << "\n";
        }
      } else {
        const auto result = dlab::experiments::run_takd_compare(cfg, out_of(cfg, "takd"));
        std::cout << "kd_mean_werr=" << dlab::fmt_double(result.kd_mean_werr)
                  << " takd_mean_werr=" << dlab::fmt_double(result.takd_mean_werr) << "\n";
        if (!result.note.empty()) std::cout << "note: " << result.note << "\n";
      }
    } else if (verify->parsed()) {
      const auto summary = dlab::risk::exhaustive_verify(verify_n, dlab::default_jobs());
      std::cout << summary.line() << "\n";
      if (summary.lemma_violations != 0 || summary.theorem_violations != 0) return 3;
    } else if (curve->parsed()) {
      const auto cfg = resolve_config(curve_args);
      const auto result = dlab::experiments::run_curve(cfg, out_of(cfg, "curve"));
      std::cout << "points=" << result.points.size() << "\n";
    } else if (grid->parsed()) {
      const auto cfg = resolve_config(grid_args);
      const auto result = dlab::experiments::run_grid(cfg, out_of(cfg, "grid"));
      std::cout << "points=" << result.points.size() << " dots=" << result.dots.size() << "\n";
    } else if (sat->parsed()) {
      const auto cfg = resolve_config(sat_args);
      const auto result = dlab::experiments::run_saturation(cfg, out_of(cfg, "saturation"));
      for (const auto& row : result.rows) {
        std::cout << "unsup_hours=" << dlab::fmt_double(row.unsupervised_hours)
                  << " mean_werr=" << dlab::fmt_double(row.mean_werr);
        if (row.marginal_werr.has_value())
          std::cout << " marginal=" << dlab::fmt_double(*row.marginal_werr);
        std::cout << "\n";
      }
    } else if (report->parsed()) {
      dlab::experiments::report_results(report_dir, std::cout);
    }
  } catch (const dlab::Error& e) {
    std::cerr << "error: " << with_config_context(e.what()) << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << with_config_context(e.what()) << "\n";
    return 4;
  }
  return 0;
}
