// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlab/matrix.hpp"

namespace dlab::data {

// Raw frames per hour of audio: 100 frames/s (10 ms hop) for 3600 s.
inline constexpr double kFramesPerHour = 100.0 * 3600.0;

// Markov state chain with per-state diagonal Gaussian emissions. Stands in
// for the corpus distribution: states play the senone role, emissions the
// acoustic features.
struct HmmSpec {
  int num_states = 32;
  int feature_dim = 16;
  Matrix transition;        // num_states x num_states, row-stochastic
  Matrix emission_means;    // num_states x feature_dim
  Matrix emission_stddevs;  // num_states x feature_dim, all > 0
  double self_loop_bias = 0.0;  // in [0,1); how the transition rows were built
};

// Throws ConfigError naming the offending field.
void validate(const HmmSpec& spec);

// Unique stationary distribution of the chain. Uniqueness requires exactly
// one closed communicating class; otherwise this throws ConfigError (an
// identity transition matrix is the canonical reject).
std::vector<double> stationary_distribution(const HmmSpec& spec);

// Convenience constructor for a structured chain: each state self-loops with
// `self_loop_bias`, favors one successor state with weight `next_state_weight`
// and spreads the rest at random. Emission means are N(0, mean_scale^2),
// stddevs uniform in [stddev_min, stddev_max].
HmmSpec make_hmm(int num_states, int feature_dim, double self_loop_bias, double mean_scale,
                 double stddev_min, double stddev_max, double next_state_weight,
                 std::uint64_t seed);

struct Utterance {
  std::string id;
  Matrix frames;                    // T x feature_dim
  std::vector<std::int32_t> labels;  // length T, values in [0, num_states)
};

enum class Split { supervised, unsupervised, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Immutable after construction; safe to share across threads.
//
// Label access is deliberately asymmetric: labels() is the trainer-facing
// path and returns nothing for the unsupervised split, while oracle_labels()
// serves evaluation and the risk oracle and counts its reads on the
// unsupervised split so pipelines can assert they never trained on hidden
// labels.
class Corpus {
 public:
  Corpus(HmmSpec spec, std::vector<Utterance> utterances, std::vector<Split> splits,
         std::uint64_t seed);

  const HmmSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  std::size_t size() const { return utterances_.size(); }
  const std::string& id(std::size_t i) const { return utterances_[i].id; }
  Split split_of(std::size_t i) const { return splits_[i]; }
  const Matrix& frames(std::size_t i) const { return utterances_[i].frames; }

  // Trainer-facing label view: absent for the unsupervised split.
  std::optional<std::span<const std::int32_t>> labels(std::size_t i) const;

  // Evaluation / risk-oracle label view; reads on the unsupervised split are
  // counted.
  std::span<const std::int32_t> oracle_labels(std::size_t i) const;
  std::uint64_t unsupervised_oracle_reads() const;

  std::vector<std::size_t> split_indices(Split s) const;
  std::int64_t total_frames() const;
  std::int64_t split_frames(Split s) const;
  double hours_equivalent() const;  // total_frames / kFramesPerHour
  double hours_of(Split s) const;

  // Persistence-only access to full utterances (labels included).
  const Utterance& storage_utterance(std::size_t i) const { return utterances_[i]; }

 private:
  HmmSpec spec_;
  std::vector<Utterance> utterances_;
  std::vector<Split> splits_;
  std::uint64_t seed_ = 0;
  mutable std::uint64_t unsup_oracle_reads_ = 0;
};

// Deterministic in (spec, num_utterances, length_range, seed): utterance i is
// generated from its own stream keyed by (seed, i), so serial and concurrent
// generation are bit-identical. Lengths are uniform in [length_range.first,
// length_range.second]; the chain starts at its stationary distribution.
// Features get per-utterance mean/variance normalization per dimension.
// All utterances land in the supervised split until split_corpus is applied.
Corpus generate_corpus(const HmmSpec& spec, int num_utterances,
                       std::pair<int, int> length_range, std::uint64_t seed, unsigned jobs = 1);

// Assigns whole utterances to splits by a seeded shuffle, filling supervised,
// then unsupervised, then test greedily until each request is met (achieved
// hours land within one utterance of the request). Utterances left over after
// all three requests are dropped from the returned corpus so the splits cover
// it exactly. Over-requests throw DataError reporting available vs requested.
Corpus split_corpus(const Corpus& corpus, double supervised_hours, double unsupervised_hours,
                    double test_hours, std::uint64_t seed);

struct WindowSpec {
  int left_context = 0;
  int right_context = 0;
  int subsample_factor = 1;

  int stacked_dim(int feature_dim) const {
    return (left_context + right_context + 1) * feature_dim;
  }
  bool operator==(const WindowSpec&) const = default;
};

void validate(const WindowSpec& window);

// Center frames kept after subsampling: t = 0, s, 2s, ... (ceil(T/s) rows).
std::vector<std::int32_t> kept_centers(std::int64_t num_frames, int subsample_factor);

// Stacks [t-left, t+right] around each kept center with edge replication at
// utterance boundaries. Inputs only; usable on label-hidden splits.
Matrix stack_inputs(const Matrix& frames, const WindowSpec& window);

struct StackedUtterance {
  Matrix frames;                      // T' x stacked_dim
  std::vector<std::int32_t> labels;   // label of each kept center
  std::vector<std::int32_t> centers;  // raw frame index of each kept center
};

StackedUtterance stack_frames(const Utterance& utt, const WindowSpec& window);

// Directory layout: spec.json (chain parameters, seed, split manifest) plus
// one binary file per utterance ("DLAB" magic, version byte, T, feature_dim,
// row-major little-endian f64 frames, i32 labels).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

std::uint64_t corpus_content_hash(const Corpus& corpus);

}  // namespace dlab::data
