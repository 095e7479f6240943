// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlab/datagen.hpp"
#include "dlab/net.hpp"

namespace dlab::distill {

// Confidence-based data selection: keep frames whose teacher max posterior
// clears min_confidence, then cap the kept set at max_fraction of all frames
// scanned, keeping the highest-confidence ones.
struct SelectionPolicy {
  double min_confidence = 0.0;
  double max_fraction = 1.0;
};

void validate(const SelectionPolicy& policy);

// Weight on soft-target CE vs hard-label CE when both sources are available.
struct MixWeight {
  double lambda = 1.0;
};

void validate(const MixWeight& mix);

// One compressed posterior: top-k classes, renormalized, fixed-point codes.
struct CompressedPosterior {
  std::vector<std::uint16_t> classes;
  std::vector<std::uint16_t> codes;
  int quant_bits = 8;
  int num_classes = 0;
};

// Top-k by probability (ties to the lower class index), renormalize the kept
// mass to 1, quantize each value to round(p * (2^bits - 1)). If every code
// rounds to zero the argmax code is bumped to 1 so the entry stays decodable.
CompressedPosterior compress_posterior(std::span<const double> posterior, int k, int quant_bits);

// Codes map to code/(2^bits - 1), renormalized to sum 1; zero elsewhere.
// Duplicate classes, out-of-range classes or overflowing codes are format
// errors.
std::vector<double> decompress(const CompressedPosterior& entry);

// Per-frame compressed teacher posteriors over (a subset of) a corpus split.
// Entries are stored as fixed k-tuples per frame, descending by probability,
// first entry the teacher argmax.
struct SoftTargetBatch {
  std::string teacher_name;
  int k = 4;
  int quant_bits = 8;
  int num_classes = 0;
  int subsample_factor = 1;

  std::vector<std::string> utt_ids;          // id table
  std::vector<std::uint32_t> ref_utt;        // per frame: index into utt_ids
  std::vector<std::uint32_t> ref_frame;      // per frame: raw center frame index
  std::vector<std::uint16_t> entry_classes;  // frame i occupies [i*k, (i+1)*k)
  std::vector<std::uint16_t> entry_codes;

  std::uint64_t frames_scanned = 0;

  std::size_t size() const { return ref_utt.size(); }
  bool empty() const { return ref_utt.empty(); }
  double kept_fraction() const;
  // Hours of raw audio the kept frames stand for (each kept center covers
  // subsample_factor raw frames).
  double hours_equivalent() const;

  std::span<const std::uint16_t> classes_of(std::size_t i) const;
  std::span<const std::uint16_t> codes_of(std::size_t i) const;
  CompressedPosterior entry(std::size_t i) const;
};

// Runs the teacher over the unsupervised split, applies the selection policy
// and compresses each kept posterior (softmax at `temperature`). An empty
// selection is a valid result with frames_scanned reporting the scan size.
// Utterance-parallel; results are merged in corpus order, so the output is
// independent of `jobs`.
SoftTargetBatch teacher_label(const net::ModelParams& teacher, const data::Corpus& corpus,
                              const SelectionPolicy& policy, int k, int quant_bits,
                              double temperature, unsigned jobs = 1);

// Keeps the leading frames (batch order) until `hours` of raw audio is
// reached; used to realize nested "more unsupervised data" ladders.
SoftTargetBatch truncate_by_hours(const SoftTargetBatch& batch, double hours);

// lambda * CE(student, soft) + (1 - lambda) * CE(student, one_hot(hard));
// with no hard label the soft term alone, regardless of lambda.
double kd_loss(std::span<const double> student_posterior, const CompressedPosterior& soft_target,
               std::optional<int> hard_label, const MixWeight& mix);

struct SubEpochCheckpoint {
  double cumulative_unsup_hours = 0.0;
  net::ModelParams params;
};

struct StudentResult {
  net::ModelParams params;
  std::vector<SubEpochCheckpoint> checkpoints;  // one per consumed sub-epoch chunk
};

// Trains a student against the soft-target stream in sub-epoch chunks of
// sub_epoch_hours, emitting a checkpoint after each chunk. The stream is
// consumed exactly once (schedule.epochs applies to the delegation path
// below, not the stream); the learning rate decays per chunk. When
// mix.lambda < 1 and supervised data is present, each chunk interleaves
// hard-label frames at a (1-lambda):lambda frame ratio, cycling through the
// supervised set. With an empty soft batch (or lambda == 0) this reduces
// exactly to net::train on the supervised data with the same schedule.
// `initial` overrides the fresh init (warm start).
StudentResult train_student(const net::ArchSpec& student_arch, const net::Dataset& supervised,
                            const SoftTargetBatch& soft, const data::Corpus& corpus,
                            const MixWeight& mix, const net::TrainSchedule& schedule,
                            double sub_epoch_hours,
                            const std::optional<net::ModelParams>& initial = std::nullopt);

// Binary batch file; see save for the exact layout. The loader resolves
// utterance id hashes against the corpus.
void save_soft_targets(const SoftTargetBatch& batch, const std::filesystem::path& path);
SoftTargetBatch load_soft_targets(const std::filesystem::path& path, const data::Corpus& corpus);

// Textual dump for debugging.
void dump_soft_targets(const SoftTargetBatch& batch, std::ostream& out, std::size_t max_frames = 32);

}  // namespace dlab::distill
