// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dlab/error.hpp"
#include "dlab/net.hpp"
#include "dlab/rng.hpp"

using namespace dlab;
using namespace dlab::net;

namespace {

ArchSpec tiny_arch(int feature_dim, std::vector<int> hidden, int classes,
                   Activation act = Activation::tanh) {
  ArchSpec arch;
  arch.window = {0, 0, 1};
  arch.feature_dim = feature_dim;
  arch.hidden_layers = std::move(hidden);
  arch.num_classes = classes;
  arch.activation = act;
  arch.name = "tiny";
  return arch;
}

double mean_ce(const ModelParams& params, const Matrix& inputs, const Targets& targets) {
  double sum = 0.0;
  for (std::size_t r = 0; r < inputs.rows; ++r) {
    const auto posterior = forward(params, inputs.row_span(r));
    sum += ce_loss_sparse(posterior, targets.classes_of(r), targets.probs_of(r));
  }
  return sum / static_cast<double>(inputs.rows);
}

// Central finite differences over every parameter; the oracle the analytic
// backward pass is checked against. Biases are nudged off zero so no relu
// unit sits exactly on its kink, where central differences stop being a
// valid oracle (any subgradient is correct there).
double max_grad_error(const ArchSpec& arch, std::uint64_t seed, std::size_t frames) {
  ModelParams params = init_params(arch, seed);
  Rng bias_rng(derive_stream(seed, "fd_bias"));
  for (auto& bias : params.biases) {
    for (double& b : bias) b = bias_rng.uniform(-0.2, 0.2);
  }
  Rng rng(derive_stream(seed, "fd_data"));
  Matrix inputs(frames, static_cast<std::size_t>(arch.input_dim()));
  for (double& v : inputs.data) v = rng.normal();
  Targets targets;
  for (std::size_t r = 0; r < frames; ++r) {
    if (r % 2 == 0) {
      targets.add_hard(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(arch.num_classes))));
    } else {
      std::vector<std::int32_t> cls;
      std::vector<double> probs;
      double sum = 0.0;
      for (int c = 0; c < arch.num_classes; ++c) {
        cls.push_back(c);
        probs.push_back(0.1 + rng.uniform());
        sum += probs.back();
      }
      for (double& p : probs) p /= sum;
      targets.add_soft(cls, probs);
    }
  }
  const Gradients grads = backward(params, inputs, targets);

  const double h = 1e-5;
  double worst = 0.0;
  auto probe = [&](double& slot, double analytic) {
    const double saved = slot;
    slot = saved + h;
    const double up = mean_ce(params, inputs, targets);
    slot = saved - h;
    const double down = mean_ce(params, inputs, targets);
    slot = saved;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
  };
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    for (std::size_t i = 0; i < params.weights[l].data.size(); ++i) {
      probe(params.weights[l].data[i], grads.weights[l].data[i]);
    }
    for (std::size_t o = 0; o < params.biases[l].size(); ++o) {
      probe(params.biases[l][o], grads.biases[l][o]);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("init: deterministic, zero biases, documented parameter count") {
  const ArchSpec arch = tiny_arch(6, {8}, 4);
  const ModelParams a = init_params(arch, 42);
  const ModelParams b = init_params(arch, 42);
  CHECK(a == b);
  CHECK(arch.param_count() == 92);  // 6*8+8 + 8*4+4
  CHECK(a.param_count() == 92);
  for (const auto& bias : a.biases) {
    for (const double v : bias) CHECK(v == 0.0);
  }
  CHECK(init_params(arch, 43).weights[0].data != a.weights[0].data);
}

TEST_CASE("forward: softmax output lies on the simplex") {
  const ArchSpec arch = tiny_arch(5, {7, 3}, 6);
  const ModelParams params = init_params(arch, 1);
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(5);
    for (double& v : x) v = rng.normal(0, 3);
    const auto p = forward(params, x);
    double sum = 0.0;
    for (const double v : p) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("forward: zero net gives the uniform posterior") {
  ArchSpec arch = tiny_arch(4, {}, 5);
  ModelParams params = init_params(arch, 7);
  for (auto& w : params.weights) std::fill(w.data.begin(), w.data.end(), 0.0);
  const auto p = forward(params, std::vector<double>{1.0, -2.0, 0.5, 3.0});
  for (const double v : p) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("forward: one-hidden-unit net matches the hand computation") {
  ArchSpec arch = tiny_arch(2, {1}, 2);
  ModelParams params = init_params(arch, 0);
  params.weights[0](0, 0) = 0.3;
  params.weights[0](0, 1) = -0.2;
  params.biases[0][0] = 0.05;
  params.weights[1](0, 0) = 0.5;
  params.weights[1](1, 0) = -0.4;
  params.biases[1][0] = 0.05;
  params.biases[1][1] = -0.02;

  const std::vector<double> x{1.0, 2.0};
  const double a = std::tanh(0.3 * 1.0 + (-0.2) * 2.0 + 0.05);
  const double z0 = 0.5 * a + 0.05;
  const double z1 = -0.4 * a - 0.02;
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  const auto p = forward(params, x);
  CHECK(std::abs(p[0] - e0 / (e0 + e1)) < 1e-12);
  CHECK(std::abs(p[1] - e1 / (e0 + e1)) < 1e-12);
}

TEST_CASE("forward: dimension mismatch is a shape error") {
  const ModelParams params = init_params(tiny_arch(4, {3}, 2), 1);
  CHECK_THROWS_AS(forward(params, std::vector<double>{1.0, 2.0}), DataError);
}

TEST_CASE("softmax with temperature") {
  SUBCASE("T=1 on [2,0]") {
    const auto p = softmax_temperature(std::vector<double>{2.0, 0.0}, 1.0);
    CHECK(std::abs(p[0] - 0.8808) < 1e-4);
    CHECK(std::abs(p[1] - 0.1192) < 1e-4);
  }
  SUBCASE("high temperature approaches uniform") {
    const auto p = softmax_temperature(std::vector<double>{5.0, -3.0, 1.0, 0.0}, 1e6);
    for (const double v : p) CHECK(std::abs(v - 0.25) < 1e-5);
  }
  SUBCASE("equal logits are uniform at every temperature") {
    for (const double t : {0.01, 1.0, 7.0, 1e6}) {
      const auto p = softmax_temperature(std::vector<double>{1.3, 1.3, 1.3}, t);
      for (const double v : p) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-13));
    }
  }
  SUBCASE("non-positive temperature is rejected") {
    CHECK_THROWS_AS(softmax_temperature(std::vector<double>{1.0}, 0.0), ConfigError);
    CHECK_THROWS_AS(softmax_temperature(std::vector<double>{1.0}, -2.0), ConfigError);
  }
  SUBCASE("argmax is invariant under temperature") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<double> logits(6);
      for (double& v : logits) v = rng.normal(0, 2);
      const int ref = argmax_class(softmax(logits));
      for (const double t : {0.25, 1.0, 4.0, 1e6}) {
        CHECK(argmax_class(softmax_temperature(logits, t)) == ref);
      }
    }
  }
  SUBCASE("no NaN for logits up to 1e3 in magnitude") {
    const auto p = softmax(std::vector<double>{1e3, -1e3, 0.0, 999.0});
    double sum = 0.0;
    for (const double v : p) {
      CHECK(std::isfinite(v));
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("cross entropy: bounds and closed forms") {
  const std::vector<double> onehot{0.0, 1.0, 0.0};
  CHECK(ce_loss(onehot, onehot) == 0.0);

  const std::vector<double> p{0.5, 0.25, 0.25};
  const double entropy = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
  CHECK(std::abs(ce_loss(p, p) - entropy) < 1e-12);

  const std::vector<double> uniform4{0.25, 0.25, 0.25, 0.25};
  const std::vector<double> onehot4{1.0, 0.0, 0.0, 0.0};
  CHECK(std::abs(ce_loss(uniform4, onehot4) - std::log(4.0)) < 1e-12);
}

TEST_CASE("backward: matches central finite differences on a 6-5-4 net") {
  CHECK(max_grad_error(tiny_arch(6, {5}, 4), 11, 8) < 1e-4);
}

TEST_CASE("backward: finite-difference property over random small nets") {
  Rng rng(202);
  int checked = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const int d = 2 + static_cast<int>(rng.below(4));
    const int classes = 2 + static_cast<int>(rng.below(3));
    std::vector<int> hidden;
    const int layers = 1 + static_cast<int>(rng.below(2));
    for (int l = 0; l < layers; ++l) hidden.push_back(2 + static_cast<int>(rng.below(4)));
    const Activation act = trial % 3 == 2 ? Activation::relu : Activation::tanh;
    const ArchSpec arch = tiny_arch(d, hidden, classes, act);
    CHECK(max_grad_error(arch, 1000 + trial, 4 + rng.below(4)) < 1e-4);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("backward: zero net with uniform targets has zero output gradient") {
  ArchSpec arch = tiny_arch(3, {}, 4);
  ModelParams params = init_params(arch, 3);
  for (auto& w : params.weights) std::fill(w.data.begin(), w.data.end(), 0.0);
  Matrix inputs(5, 3);
  Rng rng(17);
  for (double& v : inputs.data) v = rng.normal();
  Targets targets;
  const std::vector<std::int32_t> cls{0, 1, 2, 3};
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
  for (int r = 0; r < 5; ++r) targets.add_soft(cls, uniform);
  const Gradients grads = backward(params, inputs, targets);
  for (const double g : grads.biases[0]) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("backward: duplicating the batch leaves the mean gradient unchanged") {
  const ArchSpec arch = tiny_arch(4, {3}, 3);
  const ModelParams params = init_params(arch, 9);
  Matrix inputs(6, 4);
  Rng rng(23);
  for (double& v : inputs.data) v = rng.normal();
  Targets targets;
  for (int r = 0; r < 6; ++r) targets.add_hard(static_cast<std::int32_t>(rng.below(3)));

  Matrix doubled(12, 4);
  std::copy(inputs.data.begin(), inputs.data.end(), doubled.data.begin());
  std::copy(inputs.data.begin(), inputs.data.end(), doubled.data.begin() + inputs.data.size());
  Targets doubled_targets;
  for (int rep = 0; rep < 2; ++rep) {
    for (std::size_t r = 0; r < 6; ++r) {
      doubled_targets.add_soft(targets.classes_of(r), targets.probs_of(r));
    }
  }
  const Gradients a = backward(params, inputs, targets);
  const Gradients b = backward(params, doubled, doubled_targets);
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    for (std::size_t i = 0; i < a.weights[l].data.size(); ++i) {
      CHECK(std::abs(a.weights[l].data[i] - b.weights[l].data[i]) < 1e-12);
    }
  }
}

TEST_CASE("schedule: exponential decay closed forms") {
  TrainSchedule sched;
  sched.epochs = 12;
  sched.initial_lr = 0.1;
  sched.decay_gamma = 1.0;
  for (int e = 0; e < 12; ++e) CHECK(lr_at(sched, e) == 0.1);

  sched.decay_gamma = 0.8;
  CHECK(std::abs(lr_at(sched, 11) - 0.00859) < 1e-5);
}

TEST_CASE("train: drives a separable toy task to zero error and is deterministic") {
  const ArchSpec arch = tiny_arch(2, {}, 2);
  Matrix inputs(40, 2);
  std::vector<std::int32_t> labels(40);
  Rng rng(31);
  for (int r = 0; r < 40; ++r) {
    const int cls = r % 2;
    inputs(r, 0) = (cls == 0 ? -1.5 : 1.5) + 0.3 * rng.normal();
    inputs(r, 1) = rng.normal();
    labels[static_cast<std::size_t>(r)] = cls;
  }
  const Dataset data = make_labeled(inputs, labels);
  TrainSchedule sched;
  sched.epochs = 12;
  sched.initial_lr = 0.5;
  sched.decay_gamma = 0.9;
  sched.batch_size = 8;
  sched.seed = 77;
  const TrainResult a = train(init_params(arch, sched.seed), data, sched);
  CHECK(frame_error_rate(a.params, data) == 0.0);
  CHECK(a.loss_trace.size() == 12);
  for (const double loss : a.loss_trace) CHECK(std::isfinite(loss));
  CHECK(a.loss_trace.back() < a.loss_trace.front());

  const TrainResult b = train(init_params(arch, sched.seed), data, sched);
  CHECK(a.params == b.params);
}

TEST_CASE("train: empty data is a validation error") {
  const ArchSpec arch = tiny_arch(2, {}, 2);
  CHECK_THROWS_AS(train(init_params(arch, 1), Dataset{}, TrainSchedule{}), DataError);
}

TEST_CASE("train: accepts soft-labeled frames") {
  const ArchSpec arch = tiny_arch(3, {4}, 3);
  Dataset data;
  data.inputs = Matrix(30, 3);
  Rng rng(61);
  for (double& v : data.inputs.data) v = rng.normal();
  const std::vector<std::int32_t> cls{0, 1, 2};
  for (int r = 0; r < 30; ++r) {
    std::vector<double> probs{rng.uniform(), rng.uniform(), rng.uniform()};
    const double sum = probs[0] + probs[1] + probs[2];
    for (double& p : probs) p /= sum;
    data.targets.add_soft(cls, probs);
  }
  TrainSchedule sched;
  sched.epochs = 6;
  sched.initial_lr = 0.2;
  sched.seed = 3;
  const TrainResult result = train(init_params(arch, sched.seed), data, sched);
  CHECK(result.loss_trace.size() == 6);
  CHECK(result.loss_trace.back() < result.loss_trace.front());
  for (const double loss : result.loss_trace) CHECK(std::isfinite(loss));
}

TEST_CASE("frame error rate: counting rules") {
  ArchSpec arch = tiny_arch(1, {}, 4);
  ModelParams zero = init_params(arch, 1);
  for (auto& w : zero.weights) std::fill(w.data.begin(), w.data.end(), 0.0);

  SUBCASE("constant predictor on exactly balanced two-class data") {
    Matrix inputs(10, 1, 0.5);
    std::vector<std::int32_t> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
    // zero net predicts class 0 everywhere (lowest-index tie rule)
    CHECK(frame_error_rate(zero, inputs, labels) == 0.5);
  }
  SUBCASE("uniform net vs random 4-class labels") {
    const std::size_t n = 10000;
    Matrix inputs(n, 1, 0.0);
    Rng rng(4242);
    std::vector<std::int32_t> labels(n);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(4));
    const double fer = frame_error_rate(zero, inputs, labels);
    CHECK(std::abs(fer - 0.75) < 0.02);
  }
  SUBCASE("empty test set is a validation error") {
    Matrix empty(0, 1);
    CHECK_THROWS_AS(frame_error_rate(zero, empty, {}), DataError);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const ArchSpec arch = tiny_arch(3, {4, 2}, 3);
  TrainSchedule sched;
  sched.seed = 123;
  sched.initial_lr = 0.05;
  Matrix inputs(16, 3);
  Rng rng(55);
  for (double& v : inputs.data) v = rng.normal();
  std::vector<std::int32_t> labels(16);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(3));
  const TrainResult trained = train(init_params(arch, sched.seed), make_labeled(inputs, labels), sched);

  const auto path = std::filesystem::temp_directory_path() / "dlab_test_ckpt.txt";
  save_checkpoint(trained.params, sched, path);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.params == trained.params);
  CHECK(loaded.schedule.seed == sched.seed);
  CHECK(loaded.schedule.initial_lr == sched.initial_lr);
  CHECK(loaded.params.arch.hidden_layers == arch.hidden_layers);
  std::filesystem::remove(path);
}
