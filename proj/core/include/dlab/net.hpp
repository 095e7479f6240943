// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlab/datagen.hpp"
#include "dlab/matrix.hpp"

namespace dlab::net {

enum class Activation { tanh, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Context-window feedforward frame classifier. The capacity axis lives here:
// a wide symmetric window plays the teacher, a narrow causal window the
// student.
struct ArchSpec {
  data::WindowSpec window;
  int feature_dim = 16;
  std::vector<int> hidden_layers;
  int num_classes = 0;
  Activation activation = Activation::tanh;
  std::string name;

  int input_dim() const { return window.stacked_dim(feature_dim); }
  // (out, in) pairs for every weight matrix, output layer included.
  std::vector<std::pair<int, int>> layer_shapes() const;
  std::int64_t param_count() const;
};

void validate(const ArchSpec& arch);

struct ModelParams {
  ArchSpec arch;
  std::vector<Matrix> weights;              // per layer, out x in
  std::vector<std::vector<double>> biases;  // per layer, length out

  std::int64_t param_count() const;
  bool operator==(const ModelParams&) const;
};

struct TrainSchedule {
  int epochs = 12;
  double initial_lr = 0.1;
  double decay_gamma = 0.85;  // lr at epoch e is initial_lr * decay_gamma^e
  int batch_size = 32;
  std::uint64_t seed = 0;
};

void validate(const TrainSchedule& schedule);
double lr_at(const TrainSchedule& schedule, int epoch);

// Per-frame sparse target distributions in a flat CSR-style layout. A hard
// label is a single (class, 1.0) entry.
struct Targets {
  std::vector<std::int64_t> offsets{0};
  std::vector<std::int32_t> classes;
  std::vector<double> probs;

  void add_hard(std::int32_t label);
  void add_soft(std::span<const std::int32_t> cls, std::span<const double> p);
  std::size_t size() const { return offsets.size() - 1; }
  std::span<const std::int32_t> classes_of(std::size_t i) const;
  std::span<const double> probs_of(std::size_t i) const;
};

struct Dataset {
  Matrix inputs;
  Targets targets;

  std::size_t size() const { return inputs.rows; }
  bool empty() const { return inputs.rows == 0; }
};

Dataset make_labeled(Matrix inputs, std::span<const std::int32_t> labels);

// Glorot-uniform weights (biases zero), deterministic in (arch, seed).
ModelParams init_params(const ArchSpec& arch, std::uint64_t seed);

std::vector<double> forward_logits(const ModelParams& params, std::span<const double> input);
// Softmax posterior (max-subtracted); entries >= 0 and sum to 1 within 1e-12.
std::vector<double> forward(const ModelParams& params, std::span<const double> input);
Matrix forward_logits_batch(const ModelParams& params, const Matrix& inputs, unsigned jobs = 1);

std::vector<double> softmax(std::span<const double> logits);
// softmax(logits / temperature); temperature must be > 0.
std::vector<double> softmax_temperature(std::span<const double> logits, double temperature);

// -sum target_c * log(max(posterior_c, 1e-12)).
double ce_loss(std::span<const double> posterior, std::span<const double> target);
double ce_loss_sparse(std::span<const double> posterior, std::span<const std::int32_t> classes,
                      std::span<const double> probs);

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
};

// Exact analytic gradient of the mean cross-entropy loss over the batch.
Gradients backward(const ModelParams& params, const Matrix& inputs, const Targets& targets);

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_trace;  // mean cross-entropy per epoch
};

// Plain SGD with a fresh seeded shuffle per epoch and exponential learning
// rate decay. Bit-deterministic in (params, data, schedule).
TrainResult train(ModelParams params, const Dataset& data, const TrainSchedule& schedule);

// Ties broken by lowest class index.
int argmax_class(std::span<const double> values);

double frame_error_rate(const ModelParams& params, const Matrix& inputs,
                        std::span<const std::int32_t> labels, unsigned jobs = 1);
double frame_error_rate(const ModelParams& params, const Dataset& labeled, unsigned jobs = 1);

struct Checkpoint {
  ModelParams params;
  TrainSchedule schedule;
};

// Text header (arch, schedule, seed) followed by one lowercase hex f64 bit
// pattern per parameter; round trips are bit-exact.
void save_checkpoint(const ModelParams& params, const TrainSchedule& schedule,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

namespace detail {
// One SGD step on a gathered mini-batch; exposed so the distillation trainer
// shares the exact arithmetic with train().
void sgd_step(ModelParams& params, const Matrix& batch_inputs, const Targets& batch_targets,
              double lr, double* loss_sum);
}  // namespace detail

}  // namespace dlab::net
