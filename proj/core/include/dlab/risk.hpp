// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dlab/matrix.hpp"
#include "dlab/net.hpp"

namespace dlab::risk {

struct BinarySample {
  std::int64_t x_id = 0;
  int y = 1;  // -1 or +1
};

// Total map from sample ids to {-1, +1}.
class Labeling {
 public:
  Labeling() = default;
  explicit Labeling(std::string name) : name_(std::move(name)) {}

  void set(std::int64_t x_id, int value);
  int at(std::int64_t x_id) const;  // throws DataError if the id is unlabeled
  bool total_on(std::span<const BinarySample> samples) const;
  const std::string& name() const { return name_; }
  std::size_t size() const { return values_.size(); }

 private:
  std::string name_;
  std::unordered_map<std::int64_t, int> values_;
};

// (1/N) sum 1[y_i != h(x_i)].
double empirical_risk(const Labeling& h, std::span<const BinarySample> samples);

// Fraction of the subset where student and teacher disagree; empty subsets
// yield a distinguished absent value rather than 0/0.
std::optional<double> ts_risk(const Labeling& student, const Labeling& teacher,
                              std::span<const BinarySample> subset);

// Splits samples into (teacher correct, teacher wrong).
std::pair<std::vector<BinarySample>, std::vector<BinarySample>> partition(
    const Labeling& teacher, std::span<const BinarySample> samples);

// Everything the decomposition identity and the threshold condition need for
// one (teacher, student, truth) triple. Risks on empty subsets enter as 0
// with matching weight 0, so the identity stays an exact finite sum.
struct RiskReport {
  double r_teacher = 0.0;
  double r_student = 0.0;
  double r_acc = 0.0;  // student-teacher risk on the teacher-correct subset
  double r_err = 0.0;  // student-teacher risk on the teacher-wrong subset
  std::int64_t acc_size = 0;
  std::int64_t err_size = 0;
  std::optional<double> threshold;  // 1/r_teacher - 1; absent when r_teacher = 0
  std::optional<double> ratio;      // r_err/r_acc; absent when r_acc = 0
  bool student_beats_teacher = false;  // r_student <= r_teacher
};

std::string risk_report_json(const RiskReport& report);

struct DecompositionResult {
  double lhs = 0.0;  // r_student measured directly
  double rhs = 0.0;  // r_teacher * (1 - r_acc - r_err) + r_acc
  RiskReport report;
};

DecompositionResult decomposition_check(const Labeling& teacher, const Labeling& student,
                                        std::span<const BinarySample> samples);

// Evaluates both sides of the threshold biconditional. The division-free
// form r_acc <= r_teacher * (r_acc + r_err) is used throughout (it is
// algebraically identical and has no 0/0 cases); the ratio and threshold are
// reported only where defined. Throws NumericError if the biconditional were
// ever violated.
RiskReport truth_over_teacher(const Labeling& teacher, const Labeling& student,
                              std::span<const BinarySample> samples);

struct VerifySummary {
  int n = 0;
  std::uint64_t triples = 0;
  std::uint64_t lemma_violations = 0;
  std::uint64_t theorem_violations = 0;
  double seconds = 0.0;

  // "n=4 triples=4096 lemma_violations=0 theorem_violations=0 seconds=..."
  std::string line() const;
};

// Enumerates all 2^(3n) (y, teacher, student) label triples on n samples and
// checks the decomposition identity and the biconditional in exact integer
// arithmetic. n > 8 is rejected as a resource guard.
VerifySummary exhaustive_verify(int n, unsigned jobs = 1);

// One-vs-rest adapter from the multiclass frame task: label +1 iff the
// (arg)max class equals target_class, for truth, teacher and student.
// Student and teacher read their own stacked views of the same test frames
// (their windows differ), so inputs are per-model; rows must align.
struct BinarizedRun {
  std::vector<BinarySample> samples;
  Labeling teacher;
  Labeling student;
};

BinarizedRun binarize_run(const net::ModelParams& student, const net::ModelParams& teacher,
                          const Matrix& student_inputs, const Matrix& teacher_inputs,
                          std::span<const std::int32_t> test_labels, int target_class,
                          unsigned jobs = 1);

}  // namespace dlab::risk
