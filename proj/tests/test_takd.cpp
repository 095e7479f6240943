// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "dlab/error.hpp"
#include "dlab/harness.hpp"
#include "dlab/takd.hpp"

using namespace dlab;
using namespace dlab::takd;

namespace {

net::ArchSpec arch_of(std::vector<int> hidden, int left, int right, const std::string& name,
                      int feature_dim = 3, int classes = 4) {
  net::ArchSpec arch;
  arch.window = {left, right, 1};
  arch.feature_dim = feature_dim;
  arch.hidden_layers = std::move(hidden);
  arch.num_classes = classes;
  arch.name = name;
  return arch;
}

data::Corpus make_corpus() {
  const data::HmmSpec spec = data::make_hmm(4, 3, 0.85, 0.8, 0.9, 1.1, 0.6, 41);
  data::Corpus raw = data::generate_corpus(spec, 90, {30, 50}, 43);
  const double utt = 30.0 / data::kFramesPerHour;
  return data::split_corpus(raw, 14 * utt, 40 * utt, 12 * utt, 45);
}

net::TrainSchedule sched(std::uint64_t seed, int epochs = 4) {
  net::TrainSchedule s;
  s.epochs = epochs;
  s.initial_lr = 0.15;
  s.decay_gamma = 0.9;
  s.batch_size = 16;
  s.seed = seed;
  return s;
}

LinkSettings link(std::uint64_t seed) {
  LinkSettings l;
  l.k = 2;
  l.quant_bits = 8;
  l.schedule = sched(seed);
  return l;
}

}  // namespace

TEST_CASE("chain validation") {
  DistillChain chain;
  chain.stages = {arch_of({16}, 2, 2, "teacher")};
  CHECK_THROWS_WITH_AS(validate(chain), doctest::Contains("2 stages"), ConfigError);

  chain.stages.push_back(arch_of({16}, 2, 0, "student"));
  chain.links.push_back(link(1));
  // 16-wide causal has fewer inputs than 16-wide symmetric, so this is a
  // valid strictly-decreasing pair.
  validate(chain);

  chain.stages.push_back(arch_of({32, 32}, 2, 0, "bigger"));
  chain.links.push_back(link(2));
  CHECK_THROWS_WITH_AS(validate(chain), doctest::Contains("decrease"), ConfigError);
}

TEST_CASE("train_teacher: degenerate constant task reaches zero training error") {
  Matrix inputs(24, 3);
  std::vector<std::int32_t> labels(24, 2);
  for (std::size_t r = 0; r < 24; ++r) {
    inputs(r, 0) = 1.0;
    inputs(r, 1) = -0.5;
    inputs(r, 2) = 0.25;
  }
  const net::Dataset data = net::make_labeled(inputs, labels);
  const net::ArchSpec arch = arch_of({4}, 0, 0, "t");
  const auto teacher = train_teacher(arch, data, sched(7));
  CHECK(net::frame_error_rate(teacher, data) == 0.0);

  const auto again = train_teacher(arch, data, sched(7));
  CHECK(teacher == again);
}

TEST_CASE("two-stage chain is exactly direct distillation") {
  const data::Corpus corpus = make_corpus();
  DistillChain chain;
  chain.stages = {arch_of({12, 12}, 2, 2, "teacher"), arch_of({6}, 2, 0, "student")};
  chain.stage0_schedule = sched(100, 5);
  chain.links.push_back(link(200));
  const ChainResult result = run_chain(chain, corpus);
  REQUIRE(result.stages.size() == 2);

  // Replay the same two steps by hand with the same streams.
  const net::Dataset sup =
      harness::stacked_labeled(corpus, data::Split::supervised, chain.stages[0].window);
  const auto teacher = train_teacher(chain.stages[0], sup, chain.stage0_schedule);
  CHECK(teacher == result.stages[0].model);
  const auto soft = distill::teacher_label(teacher, corpus, chain.links[0].policy,
                                           chain.links[0].k, chain.links[0].quant_bits,
                                           chain.links[0].temperature);
  const auto student = distill::train_student(chain.stages[1], net::Dataset{}, soft, corpus,
                                              chain.links[0].mix, chain.links[0].schedule,
                                              soft.hours_equivalent());
  CHECK(student.params == result.stages[1].model);
}

TEST_CASE("chain results reload from checkpoints with identical test error") {
  const data::Corpus corpus = make_corpus();
  DistillChain chain;
  chain.stages = {arch_of({12, 12}, 2, 2, "teacher"), arch_of({8}, 2, 0, "assistant"),
                  arch_of({4}, 2, 0, "student")};
  chain.stage0_schedule = sched(300, 5);
  chain.links.push_back(link(301));
  chain.links.push_back(link(302));
  const ChainResult result = run_chain(chain, corpus);
  REQUIRE(result.stages.size() == 3);
  CHECK(result.baseline_name == "teacher");
  CHECK(result.stages[0].werr_vs_baseline == 0.0);

  const auto dir = std::filesystem::temp_directory_path() / "dlab_test_chain";
  std::filesystem::create_directories(dir);
  for (const auto& stage : result.stages) {
    const auto path = dir / (stage.name + ".ckpt");
    net::save_checkpoint(stage.model, chain.stage0_schedule, path);
    const auto loaded = net::load_checkpoint(path);
    const net::Dataset test =
        harness::stacked_labeled(corpus, data::Split::test, loaded.params.arch.window);
    CHECK(net::frame_error_rate(loaded.params, test) == stage.frame_error);
  }
  std::filesystem::remove_all(dir);

  const std::string csv = chain_result_csv(result);
  CHECK(csv.find("stage,params,frame_error,werr_vs_baseline,seconds") == 0);
  CHECK(csv.find("teacher") != std::string::npos);
}

TEST_CASE("kd vs takd comparison") {
  const data::Corpus corpus = make_corpus();
  const net::ArchSpec teacher = arch_of({12, 12}, 2, 2, "teacher");
  const net::ArchSpec assistant = arch_of({8}, 2, 0, "assistant");
  const net::ArchSpec student = arch_of({4}, 2, 0, "student");
  CompareSettings settings;
  settings.link = link(0);
  settings.supervised = sched(0, 5);
  const std::vector<std::uint64_t> seeds{1, 2, 3};

  const CompareResult result =
      compare_kd_takd(corpus, teacher, assistant, student, settings, seeds, 2);
  CHECK(result.seeds == seeds);
  CHECK(result.baseline_fer.size() == 3);
  CHECK(result.kd_werr.size() == 3);
  CHECK(result.takd_werr.size() == 3);
  CHECK(result.note.empty());

  const std::string csv = compare_result_csv(result);
  CHECK(csv.find("row,seed_1,seed_2,seed_3,mean") == 0);
  // 3 rows + header
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  SUBCASE("degenerate assistant is flagged") {
    const CompareResult degenerate =
        compare_kd_takd(corpus, teacher, teacher, student, settings, seeds, 2);
    CHECK_FALSE(degenerate.note.empty());
  }
  SUBCASE("fewer than three seeds is rejected") {
    const std::vector<std::uint64_t> two{1, 2};
    CHECK_THROWS_AS(compare_kd_takd(corpus, teacher, assistant, student, settings, two, 1),
                    ConfigError);
  }
}

TEST_CASE("trained teachers beat the uniform-guess rate on every seed") {
  const data::Corpus corpus = make_corpus();
  const net::ArchSpec arch = arch_of({12, 12}, 2, 2, "teacher");
  const net::Dataset sup = harness::stacked_labeled(corpus, data::Split::supervised, arch.window);
  const net::Dataset test = harness::stacked_labeled(corpus, data::Split::test, arch.window);
  const double uniform_guess = 1.0 - 1.0 / 4.0;
  for (const std::uint64_t seed : {11ull, 22ull, 33ull, 44ull, 55ull}) {
    const auto teacher = train_teacher(arch, sup, sched(seed, 5));
    CHECK(net::frame_error_rate(teacher, test) < uniform_guess);
  }
}
