// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "dlab/io.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(DLAB_CLI_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult result;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) result.output += buf;
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("dlab_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_tiny_config(const fs::path& dir) {
  const std::string config = R"({
  "seed": 4,
  "corpus": {
    "num_states": 6, "feature_dim": 4, "mean_scale": 0.7,
    "min_frames": 30, "max_frames": 50,
    "supervised_hours": 5.0, "unsupervised_hours": 12.0, "test_hours": 4.0,
    "desk_hour_frames": 90.0
  },
  "archs": {
    "teacher":   {"hidden": [10, 10], "window": {"left": 2, "right": 2, "subsample": 2}},
    "assistant": {"hidden": [8], "window": {"left": 2, "right": 0, "subsample": 2}},
    "student":   {"hidden": [6], "window": {"left": 2, "right": 0, "subsample": 2}}
  },
  "train": {"epochs": 4, "initial_lr": 0.15, "batch_size": 16},
  "distill": {"k": 3, "sub_epoch_hours": 4.0, "initial_lr": 0.15},
  "seeds": [1, 2, 3],
  "saturation": {"levels": [4.0, 8.0, 12.0]}
})";
  const fs::path path = dir / "config.json";
  dlab::atomic_write_file(path, config);
  return path;
}

std::string dir_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::string digest;
  for (const auto& f : files) {
    digest += f.filename().string() + ":" + dlab::hash_hex(dlab::fnv64_file(f)) + "\n";
  }
  return digest;
}

}  // namespace

TEST_CASE("risk-verify prints the machine-readable summary line") {
  const RunResult r = run_cli("risk-verify --n 4");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("triples=4096 lemma_violations=0 theorem_violations=0") != std::string::npos);
}

TEST_CASE("gen-data is deterministic across runs") {
  const fs::path dir = fresh_dir("gendata");
  const fs::path config = write_tiny_config(dir);

  const RunResult a = run_cli("gen-data --config " + config.string() + " --out " + (dir / "a").string());
  const RunResult b = run_cli("gen-data --config " + config.string() + " --out " + (dir / "b").string());
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  CHECK(a.output == b.output);
  CHECK(a.output.find("corpus_hash=") != std::string::npos);
  CHECK(dir_digest(dir / "a" / "gen-data" / "corpus") == dir_digest(dir / "b" / "gen-data" / "corpus"));
  fs::remove_all(dir);
}

TEST_CASE("unknown config keys fail with exit 1 naming the key and file") {
  const fs::path dir = fresh_dir("badkey");
  const fs::path bad = dir / "bad.json";
  dlab::atomic_write_file(bad, R"({"train": {"leraning_rate": 0.1}})");
  const RunResult r = run_cli("train --config " + bad.string());
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("leraning_rate") != std::string::npos);
  CHECK(r.output.find("bad.json") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("override flags reach the resolved config") {
  const fs::path dir = fresh_dir("override");
  const fs::path config = write_tiny_config(dir);
  const RunResult r = run_cli("train --config " + config.string() + " --model student --out " +
                              (dir / "t").string() + " --override train.epochs=1");
  REQUIRE(r.exit_code == 0);
  const std::string manifest =
      dlab::read_file(dir / "t" / "train-student" / "manifest.json");
  CHECK(manifest.find("\"epochs\": 1") != std::string::npos);

  const RunResult bad = run_cli("train --config " + config.string() + " --override no_such.key=1");
  CHECK(bad.exit_code == 1);
  fs::remove_all(dir);
}

TEST_CASE("train writes checkpoint, metrics and manifest") {
  const fs::path dir = fresh_dir("train");
  const fs::path config = write_tiny_config(dir);
  const RunResult r = run_cli("train --config " + config.string() + " --model teacher --out " +
                              (dir / "out").string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("frame_error=") != std::string::npos);
  CHECK(fs::exists(dir / "out" / "train-teacher" / "teacher.ckpt"));
  CHECK(fs::exists(dir / "out" / "train-teacher" / "metrics.json"));
  CHECK(fs::exists(dir / "out" / "train-teacher" / "manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("distill and report round trip") {
  const fs::path dir = fresh_dir("distill");
  const fs::path config = write_tiny_config(dir);
  const RunResult d = run_cli("distill --config " + config.string() + " --out " + (dir / "out").string());
  REQUIRE(d.exit_code == 0);
  CHECK(fs::exists(dir / "out" / "distill" / "soft_targets.bin"));
  CHECK(fs::exists(dir / "out" / "distill" / "distill_curve.csv"));

  const RunResult rep = run_cli("report " + (dir / "out").string());
  CHECK(rep.exit_code == 0);
  CHECK(rep.output.find("distill") != std::string::npos);
  CHECK(fs::exists(dir / "out" / "combined.csv"));

  // Idempotent: a second report leaves the combined file identical.
  const std::string before = dlab::read_file(dir / "out" / "combined.csv");
  const RunResult rep2 = run_cli("report " + (dir / "out").string());
  CHECK(rep2.exit_code == 0);
  CHECK(dlab::read_file(dir / "out" / "combined.csv") == before);
  fs::remove_all(dir);
}

TEST_CASE("report on a directory without manifests exits 2") {
  const fs::path dir = fresh_dir("emptyreport");
  const RunResult r = run_cli("report " + dir.string());
  CHECK(r.exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("report flags experiments with missing outputs") {
  const fs::path dir = fresh_dir("incomplete");
  const fs::path config = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + config.string() + " --model student --out " +
                  (dir / "out").string())
              .exit_code == 0);
  fs::remove(dir / "out" / "train-student" / "metrics.json");
  const RunResult r = run_cli("report " + (dir / "out").string());
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("INCOMPLETE") != std::string::npos);
  CHECK(r.output.find("metrics.json") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("corrupt manifests exit 2 listing the files") {
  const fs::path dir = fresh_dir("corrupt");
  fs::create_directories(dir / "x");
  dlab::atomic_write_file(dir / "x" / "manifest.json", "{not json");
  const RunResult r = run_cli("report " + dir.string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("manifest.json") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("curve command emits points and a reusable manifest") {
  const fs::path dir = fresh_dir("curve");
  const fs::path config = write_tiny_config(dir);
  const RunResult r = run_cli("curve --config " + config.string() + " --out " + (dir / "out").string() +
                              " --jobs 2 --override seeds=[1,2]");
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(dir / "out" / "curve" / "curve_points.csv"));

  // Rerun from the manifest: byte-identical CSV.
  const RunResult rerun = run_cli("curve --config " + (dir / "out" / "curve" / "manifest.json").string() +
                                  " --out " + (dir / "out2").string() + " --jobs 2");
  REQUIRE(rerun.exit_code == 0);
  CHECK(dlab::read_file(dir / "out" / "curve" / "curve_points.csv") ==
        dlab::read_file(dir / "out2" / "curve" / "curve_points.csv"));
  fs::remove_all(dir);
}
