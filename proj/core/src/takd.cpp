// SPDX-License-Identifier: Apache-2.0
#include "dlab/takd.hpp"

#include <chrono>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dlab/error.hpp"
#include "dlab/harness.hpp"
#include "dlab/io.hpp"
#include "dlab/parallel.hpp"
#include "dlab/rng.hpp"

namespace dlab::takd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

net::Dataset stacked_for(const data::Corpus& corpus, data::Split split,
                         const data::WindowSpec& window) {
  return harness::stacked_labeled(corpus, split, window);
}

double chunk_hours(const LinkSettings& link, const distill::SoftTargetBatch& soft) {
  return link.sub_epoch_hours > 0.0 ? link.sub_epoch_hours
                                    : std::max(soft.hours_equivalent(), 1.0 / data::kFramesPerHour);
}

}  // namespace

void validate(const DistillChain& chain) {
  if (chain.stages.size() < 2) throw ConfigError("DistillChain: need at least 2 stages");
  if (chain.links.size() != chain.stages.size() - 1)
    throw ConfigError("DistillChain: need exactly one link per adjacent stage pair");
  for (const auto& stage : chain.stages) net::validate(stage);
  for (std::size_t i = 1; i < chain.stages.size(); ++i) {
    if (chain.stages[i].param_count() >= chain.stages[i - 1].param_count()) {
      throw ConfigError("DistillChain: stage capacities must decrease strictly (stage " +
                        std::to_string(i) + " has " + std::to_string(chain.stages[i].param_count()) +
                        " params, previous has " +
                        std::to_string(chain.stages[i - 1].param_count()) + ")");
    }
  }
}

net::ModelParams train_teacher(const net::ArchSpec& arch, const net::Dataset& supervised,
                               const net::TrainSchedule& schedule) {
  if (supervised.empty()) throw DataError("train_teacher: empty supervised data");
  return net::train(net::init_params(arch, schedule.seed), supervised, schedule).params;
}

ChainResult run_chain(const DistillChain& chain, const data::Corpus& corpus, unsigned jobs) {
  validate(chain);
  if (corpus.split_indices(data::Split::supervised).empty())
    throw ConfigError("run_chain: corpus has no supervised split for stage 0");
  for (const LinkSettings& link : chain.links) {
    if (corpus.split_indices(link.source_split).empty())
      throw ConfigError("run_chain: corpus has no '" + data::to_string(link.source_split) +
                        "' split for a distillation link");
  }
  const net::Dataset test =
      stacked_for(corpus, data::Split::test, chain.stages.front().window);
  if (test.empty()) throw DataError("run_chain: empty test split");

  ChainResult result;
  std::vector<net::ModelParams> models;
  for (std::size_t i = 0; i < chain.stages.size(); ++i) {
    const auto start = Clock::now();
    const net::ArchSpec& arch = chain.stages[i];
    try {
      if (i == 0) {
        const net::Dataset sup = stacked_for(corpus, data::Split::supervised, arch.window);
        models.push_back(train_teacher(arch, sup, chain.stage0_schedule));
      } else {
        const LinkSettings& link = chain.links[i - 1];
        const net::ModelParams& upstream = models[i - 1];
        const auto soft =
            distill::teacher_label(upstream, corpus, link.policy, link.k, link.quant_bits,
                                   link.temperature, jobs);
        const net::Dataset sup =
            link.mix.lambda < 1.0 ? stacked_for(corpus, data::Split::supervised, arch.window)
                                  : net::Dataset{};
        models.push_back(distill::train_student(arch, sup, soft, corpus, link.mix, link.schedule,
                                                chunk_hours(link, soft))
                             .params);
      }
    } catch (const NumericError& e) {
      throw NumericError("chain stage " + std::to_string(i) + " (" + arch.name +
                         "): " + e.what());
    }

    StageResult stage;
    stage.name = arch.name.empty() ? "stage" + std::to_string(i) : arch.name;
    stage.params = arch.param_count();
    const net::Dataset stage_test = stacked_for(corpus, data::Split::test, arch.window);
    stage.frame_error = net::frame_error_rate(models.back(), stage_test, jobs);
    stage.seconds = seconds_since(start);
    stage.model = models.back();
    result.stages.push_back(std::move(stage));
  }

  if (chain.baseline_error.has_value()) {
    result.baseline_error = *chain.baseline_error;
    result.baseline_name = "declared";
  } else {
    result.baseline_error = result.stages.front().frame_error;
    result.baseline_name = result.stages.front().name;
  }
  for (auto& stage : result.stages) {
    stage.werr_vs_baseline = harness::werr(result.baseline_error, stage.frame_error);
  }
  return result;
}

std::string chain_result_csv(const ChainResult& result) {
  std::string csv = "stage,params,frame_error,werr_vs_baseline,seconds\n";
  for (const auto& stage : result.stages) {
    csv += csv_join({stage.name, std::to_string(stage.params), fmt_double(stage.frame_error),
                     fmt_double(stage.werr_vs_baseline), fmt_double(stage.seconds)});
  }
  return csv;
}

std::string chain_result_json(const ChainResult& result) {
  nlohmann::json j;
  j["baseline_name"] = result.baseline_name;
  j["baseline_error"] = result.baseline_error;
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& stage : result.stages) {
    stages.push_back({{"stage", stage.name},
                      {"params", stage.params},
                      {"frame_error", stage.frame_error},
                      {"werr_vs_baseline", stage.werr_vs_baseline},
                      {"seconds", stage.seconds}});
  }
  j["stages"] = std::move(stages);
  return j.dump(2) + "\n";
}

CompareResult compare_kd_takd(const data::Corpus& corpus, const net::ArchSpec& teacher_arch,
                              const net::ArchSpec& assistant_arch,
                              const net::ArchSpec& student_arch, const CompareSettings& settings,
                              std::span<const std::uint64_t> seeds, unsigned jobs) {
  if (seeds.size() < 3) throw ConfigError("compare_kd_takd: need at least 3 seeds");
  net::validate(teacher_arch);
  net::validate(assistant_arch);
  net::validate(student_arch);

  CompareResult result;
  result.seeds.assign(seeds.begin(), seeds.end());
  result.baseline_fer.resize(seeds.size());
  result.kd_werr.resize(seeds.size());
  result.takd_werr.resize(seeds.size());
  if (assistant_arch.param_count() >= teacher_arch.param_count()) {
    result.note =
        "degenerate: assistant capacity is not below the teacher, TAKD reduces to KD "
        "plus an extra pass on near-identical targets";
  }

  const net::Dataset sup_teacher = stacked_for(corpus, data::Split::supervised, teacher_arch.window);
  const net::Dataset sup_assistant =
      stacked_for(corpus, data::Split::supervised, assistant_arch.window);
  const net::Dataset sup_student = stacked_for(corpus, data::Split::supervised, student_arch.window);
  const net::Dataset test_student = stacked_for(corpus, data::Split::test, student_arch.window);
  if (test_student.empty()) throw DataError("compare_kd_takd: empty test split");

  const LinkSettings& link = settings.link;
  auto link_schedule = [&](std::uint64_t seed) {
    net::TrainSchedule s = link.schedule;
    s.seed = seed;
    return s;
  };

  result.job_seconds.resize(seeds.size());
  parallel_for(seeds.size(), jobs, [&](std::size_t si) {
    const auto job_start = Clock::now();
    const std::uint64_t s = seeds[si];

    net::TrainSchedule teacher_sched = settings.supervised;
    teacher_sched.seed = derive_stream(s, "takd_teacher");
    const net::ModelParams teacher = train_teacher(teacher_arch, sup_teacher, teacher_sched);

    net::TrainSchedule baseline_sched = settings.supervised;
    baseline_sched.seed = derive_stream(s, "takd_student");
    const auto baseline =
        net::train(net::init_params(student_arch, baseline_sched.seed), sup_student, baseline_sched);
    const double b = net::frame_error_rate(baseline.params, test_student);
    result.baseline_fer[si] = b;

    // Direct KD: teacher labels, student trains. The student shares the
    // baseline's init stream so the comparison isolates the targets.
    const auto teacher_soft = distill::teacher_label(teacher, corpus, link.policy, link.k,
                                                     link.quant_bits, link.temperature);
    const auto kd_student = distill::train_student(
        student_arch, sup_student, teacher_soft, corpus, link.mix,
        link_schedule(derive_stream(s, "takd_student")), chunk_hours(link, teacher_soft));
    result.kd_werr[si] = harness::werr(b, net::frame_error_rate(kd_student.params, test_student));

    // TAKD: teacher -> assistant -> student.
    const auto assistant = distill::train_student(
        assistant_arch, sup_assistant, teacher_soft, corpus, link.mix,
        link_schedule(derive_stream(s, "takd_assistant")), chunk_hours(link, teacher_soft));
    const auto assistant_soft = distill::teacher_label(assistant.params, corpus, link.policy,
                                                       link.k, link.quant_bits, link.temperature);
    const auto takd_student = distill::train_student(
        student_arch, sup_student, assistant_soft, corpus, link.mix,
        link_schedule(derive_stream(s, "takd_student")), chunk_hours(link, assistant_soft));
    result.takd_werr[si] =
        harness::werr(b, net::frame_error_rate(takd_student.params, test_student));
    result.job_seconds[si] = seconds_since(job_start);
  });

  auto mean = [](const std::vector<double>& v) {
    double sum = 0.0;
    for (const double x : v) sum += x;
    return sum / static_cast<double>(v.size());
  };
  result.baseline_mean_fer = mean(result.baseline_fer);
  result.kd_mean_werr = mean(result.kd_werr);
  result.takd_mean_werr = mean(result.takd_werr);
  return result;
}

std::string compare_result_csv(const CompareResult& result) {
  std::vector<std::string> header{"row"};
  for (const std::uint64_t s : result.seeds) header.push_back("seed_" + std::to_string(s));
  header.push_back("mean");
  std::string csv = csv_join(header);

  auto emit = [&](const std::string& name, const std::vector<double>& values, double mean) {
    std::vector<std::string> row{name};
    for (const double v : values) row.push_back(fmt_double(v));
    row.push_back(fmt_double(mean));
    csv += csv_join(row);
  };
  emit("baseline_fer", result.baseline_fer, result.baseline_mean_fer);
  emit("kd_werr", result.kd_werr, result.kd_mean_werr);
  emit("takd_werr", result.takd_werr, result.takd_mean_werr);
  return csv;
}

}  // namespace dlab::takd
