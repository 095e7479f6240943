// SPDX-License-Identifier: Apache-2.0
#include "dlab/risk.hpp"

#include <bit>
#include <chrono>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "dlab/error.hpp"
#include "dlab/parallel.hpp"

namespace dlab::risk {

namespace {

// Exact counts describing one (truth, teacher, student) triple.
struct Counts {
  std::int64_t n = 0;
  std::int64_t teacher_errors = 0;   // E; acc size is n - E
  std::int64_t acc_disagree = 0;     // student != teacher on the acc set
  std::int64_t err_disagree = 0;     // student != teacher on the err set
  std::int64_t student_errors = 0;   // Es = acc_disagree + E - err_disagree
};

Counts count_triple(const Labeling& teacher, const Labeling& student,
                    std::span<const BinarySample> samples) {
  Counts c;
  c.n = static_cast<std::int64_t>(samples.size());
  for (const BinarySample& s : samples) {
    const int ht = teacher.at(s.x_id);
    const int hs = student.at(s.x_id);
    const bool teacher_wrong = ht != s.y;
    const bool disagree = ht != hs;
    if (teacher_wrong) {
      ++c.teacher_errors;
      if (disagree) ++c.err_disagree;
    } else if (disagree) {
      ++c.acc_disagree;
    }
    if (hs != s.y) ++c.student_errors;
  }
  return c;
}

RiskReport report_from_counts(const Counts& c) {
  RiskReport r;
  const auto n = static_cast<double>(c.n);
  const std::int64_t acc = c.n - c.teacher_errors;
  r.acc_size = acc;
  r.err_size = c.teacher_errors;
  r.r_teacher = static_cast<double>(c.teacher_errors) / n;
  r.r_student = static_cast<double>(c.student_errors) / n;
  r.r_acc = acc > 0 ? static_cast<double>(c.acc_disagree) / static_cast<double>(acc) : 0.0;
  r.r_err = c.teacher_errors > 0
                ? static_cast<double>(c.err_disagree) / static_cast<double>(c.teacher_errors)
                : 0.0;
  if (c.teacher_errors > 0) r.threshold = 1.0 / r.r_teacher - 1.0;
  if (acc > 0 && c.acc_disagree > 0) r.ratio = r.r_err / r.r_acc;
  r.student_beats_teacher = c.student_errors <= c.teacher_errors;
  return r;
}

// Division-free threshold condition, exact in integers:
//   r_acc <= r_teacher * (r_acc + r_err)
// with the empty-subset convention (risk 0 on empty subsets). Multiplying by
// N * max(A,1) * max(E,1) gives the comparison below.
bool threshold_condition(const Counts& c) {
  const std::int64_t acc = c.n - c.teacher_errors;
  const std::int64_t a1 = acc > 0 ? acc : 1;
  const std::int64_t e1 = c.teacher_errors > 0 ? c.teacher_errors : 1;
  const std::int64_t lhs = acc > 0 ? c.acc_disagree * c.n * e1 : 0;
  const std::int64_t rhs =
      c.teacher_errors * ((acc > 0 ? c.acc_disagree * e1 : 0) +
                          (c.teacher_errors > 0 ? c.err_disagree * a1 : 0));
  return lhs <= rhs;
}

// Both lemma sides scaled by N * max(A,1) * max(E,1); exact in integers.
std::pair<std::int64_t, std::int64_t> lemma_sides(const Counts& c) {
  const std::int64_t acc = c.n - c.teacher_errors;
  const std::int64_t e = c.teacher_errors;
  const std::int64_t a1 = acc > 0 ? acc : 1;
  const std::int64_t e1 = e > 0 ? e : 1;
  const std::int64_t lhs = c.student_errors * a1 * e1;
  const std::int64_t rhs = e * a1 * e1 -
                           e * ((acc > 0 ? c.acc_disagree * e1 : 0) +
                                (e > 0 ? c.err_disagree * a1 : 0)) +
                           (acc > 0 ? c.acc_disagree * c.n * e1 : 0);
  return {lhs, rhs};
}

void require_inputs(const Labeling& teacher, const Labeling& student,
                    std::span<const BinarySample> samples) {
  if (samples.empty()) throw DataError("risk: empty sample set");
  if (!teacher.total_on(samples))
    throw DataError("risk: teacher labeling '" + teacher.name() + "' is not total on the samples");
  if (!student.total_on(samples))
    throw DataError("risk: student labeling '" + student.name() + "' is not total on the samples");
}

}  // namespace

void Labeling::set(std::int64_t x_id, int value) {
  if (value != -1 && value != 1) throw DataError("Labeling: values must be -1 or +1");
  values_[x_id] = value;
}

int Labeling::at(std::int64_t x_id) const {
  const auto it = values_.find(x_id);
  if (it == values_.end())
    throw DataError("Labeling '" + name_ + "': no value for sample " + std::to_string(x_id));
  return it->second;
}

bool Labeling::total_on(std::span<const BinarySample> samples) const {
  for (const BinarySample& s : samples) {
    if (!values_.contains(s.x_id)) return false;
  }
  return true;
}

double empirical_risk(const Labeling& h, std::span<const BinarySample> samples) {
  if (samples.empty()) throw DataError("empirical_risk: empty sample set");
  if (!h.total_on(samples))
    throw DataError("empirical_risk: labeling '" + h.name() + "' is not total on the samples");
  std::int64_t errors = 0;
  for (const BinarySample& s : samples) {
    if (h.at(s.x_id) != s.y) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(samples.size());
}

std::optional<double> ts_risk(const Labeling& student, const Labeling& teacher,
                              std::span<const BinarySample> subset) {
  if (subset.empty()) return std::nullopt;
  std::int64_t disagreements = 0;
  for (const BinarySample& s : subset) {
    if (student.at(s.x_id) != teacher.at(s.x_id)) ++disagreements;
  }
  return static_cast<double>(disagreements) / static_cast<double>(subset.size());
}

std::pair<std::vector<BinarySample>, std::vector<BinarySample>> partition(
    const Labeling& teacher, std::span<const BinarySample> samples) {
  std::vector<BinarySample> acc, err;
  for (const BinarySample& s : samples) {
    (teacher.at(s.x_id) == s.y ? acc : err).push_back(s);
  }
  return {std::move(acc), std::move(err)};
}

DecompositionResult decomposition_check(const Labeling& teacher, const Labeling& student,
                                        std::span<const BinarySample> samples) {
  require_inputs(teacher, student, samples);
  const Counts c = count_triple(teacher, student, samples);
  DecompositionResult result;
  result.report = report_from_counts(c);
  result.lhs = result.report.r_student;
  result.rhs = result.report.r_teacher * (1.0 - result.report.r_acc - result.report.r_err) +
               result.report.r_acc;
  return result;
}

RiskReport truth_over_teacher(const Labeling& teacher, const Labeling& student,
                              std::span<const BinarySample> samples) {
  require_inputs(teacher, student, samples);
  const Counts c = count_triple(teacher, student, samples);
  RiskReport report = report_from_counts(c);
  const bool condition = threshold_condition(c);
  if (condition != (c.student_errors <= c.teacher_errors)) {
    throw NumericError("truth_over_teacher: biconditional violated (internal invariant)");
  }
  return report;
}

std::string risk_report_json(const RiskReport& report) {
  nlohmann::json j;
  j["r_teacher"] = report.r_teacher;
  j["r_student"] = report.r_student;
  j["r_acc"] = report.r_acc;
  j["r_err"] = report.r_err;
  j["acc_size"] = report.acc_size;
  j["err_size"] = report.err_size;
  if (report.threshold.has_value()) j["threshold"] = *report.threshold;
  if (report.ratio.has_value()) j["ratio"] = *report.ratio;
  j["student_beats_teacher"] = report.student_beats_teacher;
  return j.dump();
}

std::string VerifySummary::line() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "n=%d triples=%llu lemma_violations=%llu theorem_violations=%llu seconds=%.3f",
                n, static_cast<unsigned long long>(triples),
                static_cast<unsigned long long>(lemma_violations),
                static_cast<unsigned long long>(theorem_violations), seconds);
  return buf;
}

VerifySummary exhaustive_verify(int n, unsigned jobs) {
  if (n < 1) throw ConfigError("exhaustive_verify: n must be >= 1");
  if (n > 8)
    throw ResourceError("exhaustive_verify: n > 8 would enumerate more than 2^24 triples");
  const auto start = std::chrono::steady_clock::now();

  const std::uint32_t space = 1u << n;
  struct Shard {
    std::uint64_t lemma = 0;
    std::uint64_t theorem = 0;
  };
  std::vector<Shard> shards(space);
  parallel_for(space, jobs, [&](std::size_t yi) {
    const auto y = static_cast<std::uint32_t>(yi);
    Shard& shard = shards[yi];
    for (std::uint32_t ht = 0; ht < space; ++ht) {
      const std::uint32_t terr_mask = y ^ ht;
      const int e = std::popcount(terr_mask);
      for (std::uint32_t hs = 0; hs < space; ++hs) {
        const std::uint32_t dis = ht ^ hs;
        Counts c;
        c.n = n;
        c.teacher_errors = e;
        c.err_disagree = std::popcount(dis & terr_mask);
        c.acc_disagree = std::popcount(dis & ~terr_mask & (space - 1));
        c.student_errors = std::popcount(y ^ hs);
        const auto [lhs, rhs] = lemma_sides(c);
        if (lhs != rhs) ++shard.lemma;
        if (threshold_condition(c) != (c.student_errors <= c.teacher_errors)) ++shard.theorem;
      }
    }
  });

  VerifySummary summary;
  summary.n = n;
  summary.triples = static_cast<std::uint64_t>(space) * space * space;
  for (const Shard& s : shards) {
    summary.lemma_violations += s.lemma;
    summary.theorem_violations += s.theorem;
  }
  summary.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

BinarizedRun binarize_run(const net::ModelParams& student, const net::ModelParams& teacher,
                          const Matrix& student_inputs, const Matrix& teacher_inputs,
                          std::span<const std::int32_t> test_labels, int target_class,
                          unsigned jobs) {
  if (student_inputs.rows == 0) throw DataError("binarize_run: empty test set");
  if (student_inputs.rows != test_labels.size() || teacher_inputs.rows != test_labels.size())
    throw DataError("binarize_run: frames and labels disagree");
  if (target_class < 0 || target_class >= teacher.arch.num_classes)
    throw ConfigError("binarize_run: target_class out of range");

  const Matrix teacher_logits = net::forward_logits_batch(teacher, teacher_inputs, jobs);
  const Matrix student_logits = net::forward_logits_batch(student, student_inputs, jobs);

  BinarizedRun run;
  run.teacher = Labeling("teacher");
  run.student = Labeling("student");
  run.samples.reserve(student_inputs.rows);
  for (std::size_t r = 0; r < student_inputs.rows; ++r) {
    const auto id = static_cast<std::int64_t>(r);
    run.samples.push_back({id, test_labels[r] == target_class ? 1 : -1});
    run.teacher.set(id, net::argmax_class(teacher_logits.row_span(r)) == target_class ? 1 : -1);
    run.student.set(id, net::argmax_class(student_logits.row_span(r)) == target_class ? 1 : -1);
  }
  return run;
}

}  // namespace dlab::risk
