// SPDX-License-Identifier: Apache-2.0
#include "dlab/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/parallel.hpp"
#include "dlab/rng.hpp"

namespace dlab::net {

namespace {

constexpr double kLogClamp = 1e-12;

double activate(Activation a, double z) {
  return a == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}

// Derivative expressed through the post-activation value.
double activate_grad(Activation a, double y) {
  return a == Activation::tanh ? 1.0 - y * y : (y > 0.0 ? 1.0 : 0.0);
}

void check_finite(std::span<const double> values, const std::string& what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
  }
}

// y = x W^T + b for a row-major batch.
void affine_forward(const Matrix& w, const std::vector<double>& b, const Matrix& x, Matrix& y) {
  y = Matrix(x.rows, w.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double* yr = y.row(r);
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double* wr = w.row(o);
      double acc = b[o];
      for (std::size_t i = 0; i < w.cols; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
}

struct BatchWorkspace {
  std::vector<Matrix> activations;  // [0] = input batch, then post-activation per hidden layer
  Matrix logits;
  Matrix delta;       // gradient wrt pre-activation of the current layer
  Matrix delta_prev;  // scratch for backprop
};

// Forward pass storing hidden activations, then backprop of the mean CE
// gradient. Gradients are accumulated into grad_w/grad_b (zeroed here).
// Returns the batch loss sum.
double forward_backward(const ModelParams& params, const Matrix& batch, const Targets& targets,
                        std::size_t target_offset, std::vector<Matrix>& grad_w,
                        std::vector<std::vector<double>>& grad_b, BatchWorkspace& ws) {
  const std::size_t layers = params.weights.size();
  const std::size_t batch_size = batch.rows;
  const Activation act = params.arch.activation;

  ws.activations.resize(layers);  // activations[l] = output of hidden layer l (post-activation)
  const Matrix* current = &batch;
  for (std::size_t l = 0; l + 1 < layers; ++l) {
    affine_forward(params.weights[l], params.biases[l], *current, ws.activations[l]);
    for (double& v : ws.activations[l].data) v = activate(act, v);
    current = &ws.activations[l];
  }
  affine_forward(params.weights[layers - 1], params.biases[layers - 1], *current, ws.logits);

  // Output delta = (softmax(logits) - target) / batch_size.
  double loss_sum = 0.0;
  ws.delta = ws.logits;
  const double inv_b = 1.0 / static_cast<double>(batch_size);
  for (std::size_t r = 0; r < batch_size; ++r) {
    double* row = ws.delta.row(r);
    const std::size_t c = ws.delta.cols;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < c; ++j) row[j] *= inv;
    const auto cls = targets.classes_of(target_offset + r);
    const auto probs = targets.probs_of(target_offset + r);
    for (std::size_t k = 0; k < cls.size(); ++k) {
      const double p = row[static_cast<std::size_t>(cls[k])];
      loss_sum -= probs[k] * std::log(std::max(p, kLogClamp));
    }
    for (std::size_t k = 0; k < cls.size(); ++k) row[static_cast<std::size_t>(cls[k])] -= probs[k];
    for (std::size_t j = 0; j < c; ++j) row[j] *= inv_b;
  }
  if (!std::isfinite(loss_sum)) throw NumericError("non-finite loss at output layer");

  grad_w.resize(layers);
  grad_b.resize(layers);
  for (std::size_t l = layers; l-- > 0;) {
    const Matrix& input = (l == 0) ? batch : ws.activations[l - 1];
    Matrix& gw = grad_w[l];
    if (gw.rows != params.weights[l].rows || gw.cols != params.weights[l].cols) {
      gw = Matrix(params.weights[l].rows, params.weights[l].cols);
    } else {
      std::fill(gw.data.begin(), gw.data.end(), 0.0);
    }
    auto& gb = grad_b[l];
    gb.assign(params.biases[l].size(), 0.0);

    // gw[o] += sum_r delta[r][o] * input[r]; gb[o] += sum_r delta[r][o]
    for (std::size_t r = 0; r < batch_size; ++r) {
      const double* dr = ws.delta.row(r);
      const double* xr = input.row(r);
      for (std::size_t o = 0; o < gw.rows; ++o) {
        const double d = dr[o];
        if (d == 0.0) continue;
        gb[o] += d;
        double* gwr = gw.row(o);
        for (std::size_t i = 0; i < gw.cols; ++i) gwr[i] += d * xr[i];
      }
    }
    check_finite(gw.data, "gradient at layer " + std::to_string(l));

    if (l > 0) {
      // delta_prev = (delta W) * act'(activation of layer l-1)
      ws.delta_prev = Matrix(batch_size, params.weights[l].cols);
      for (std::size_t r = 0; r < batch_size; ++r) {
        const double* dr = ws.delta.row(r);
        double* pr = ws.delta_prev.row(r);
        for (std::size_t o = 0; o < params.weights[l].rows; ++o) {
          const double d = dr[o];
          if (d == 0.0) continue;
          const double* wr = params.weights[l].row(o);
          for (std::size_t i = 0; i < params.weights[l].cols; ++i) pr[i] += d * wr[i];
        }
        const double* ar = ws.activations[l - 1].row(r);
        for (std::size_t i = 0; i < ws.delta_prev.cols; ++i) pr[i] *= activate_grad(act, ar[i]);
      }
      std::swap(ws.delta, ws.delta_prev);
    }
  }
  return loss_sum;
}

void gather_rows(const Matrix& src, std::span<const std::size_t> indices, Matrix& dst) {
  dst = Matrix(indices.size(), src.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const double* s = src.row(indices[r]);
    std::copy(s, s + src.cols, dst.row(r));
  }
}

void gather_targets(const Targets& src, std::span<const std::size_t> indices, Targets& dst) {
  dst.offsets.assign(1, 0);
  dst.classes.clear();
  dst.probs.clear();
  for (const std::size_t i : indices) {
    const auto cls = src.classes_of(i);
    const auto probs = src.probs_of(i);
    dst.classes.insert(dst.classes.end(), cls.begin(), cls.end());
    dst.probs.insert(dst.probs.end(), probs.begin(), probs.end());
    dst.offsets.push_back(static_cast<std::int64_t>(dst.classes.size()));
  }
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("activation: expected 'tanh' or 'relu', got '" + s + "'");
}

std::vector<std::pair<int, int>> ArchSpec::layer_shapes() const {
  std::vector<std::pair<int, int>> shapes;
  int in = input_dim();
  for (const int width : hidden_layers) {
    shapes.emplace_back(width, in);
    in = width;
  }
  shapes.emplace_back(num_classes, in);
  return shapes;
}

std::int64_t ArchSpec::param_count() const {
  std::int64_t count = 0;
  for (const auto& [out, in] : layer_shapes()) {
    count += static_cast<std::int64_t>(out) * in + out;
  }
  return count;
}

void validate(const ArchSpec& arch) {
  data::validate(arch.window);
  if (arch.feature_dim < 1) throw ConfigError("ArchSpec.feature_dim: must be >= 1");
  if (arch.num_classes < 2) throw ConfigError("ArchSpec.num_classes: must be >= 2");
  for (const int w : arch.hidden_layers) {
    if (w < 1) throw ConfigError("ArchSpec.hidden_layers: widths must be >= 1");
  }
}

std::int64_t ModelParams::param_count() const {
  std::int64_t count = 0;
  for (const auto& w : weights) count += static_cast<std::int64_t>(w.size());
  for (const auto& b : biases) count += static_cast<std::int64_t>(b.size());
  return count;
}

bool ModelParams::operator==(const ModelParams& other) const {
  return weights == other.weights && biases == other.biases;
}

void validate(const TrainSchedule& schedule) {
  if (schedule.epochs < 1) throw ConfigError("TrainSchedule.epochs: must be >= 1");
  if (!(schedule.initial_lr > 0.0)) throw ConfigError("TrainSchedule.initial_lr: must be > 0");
  if (!(schedule.decay_gamma > 0.0) || schedule.decay_gamma > 1.0)
    throw ConfigError("TrainSchedule.decay_gamma: must be in (0, 1]");
  if (schedule.batch_size < 1) throw ConfigError("TrainSchedule.batch_size: must be >= 1");
}

double lr_at(const TrainSchedule& schedule, int epoch) {
  return schedule.initial_lr * std::pow(schedule.decay_gamma, epoch);
}

void Targets::add_hard(std::int32_t label) {
  classes.push_back(label);
  probs.push_back(1.0);
  offsets.push_back(static_cast<std::int64_t>(classes.size()));
}

void Targets::add_soft(std::span<const std::int32_t> cls, std::span<const double> p) {
  classes.insert(classes.end(), cls.begin(), cls.end());
  probs.insert(probs.end(), p.begin(), p.end());
  offsets.push_back(static_cast<std::int64_t>(classes.size()));
}

std::span<const std::int32_t> Targets::classes_of(std::size_t i) const {
  return {classes.data() + offsets[i], static_cast<std::size_t>(offsets[i + 1] - offsets[i])};
}

std::span<const double> Targets::probs_of(std::size_t i) const {
  return {probs.data() + offsets[i], static_cast<std::size_t>(offsets[i + 1] - offsets[i])};
}

Dataset make_labeled(Matrix inputs, std::span<const std::int32_t> labels) {
  if (inputs.rows != labels.size()) throw DataError("make_labeled: frames and labels disagree");
  Dataset d;
  d.inputs = std::move(inputs);
  for (const std::int32_t l : labels) d.targets.add_hard(l);
  return d;
}

ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  validate(arch);
  ModelParams params;
  params.arch = arch;
  const auto shapes = arch.layer_shapes();
  params.weights.reserve(shapes.size());
  params.biases.reserve(shapes.size());
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto [out, in] = shapes[l];
    Matrix w(static_cast<std::size_t>(out), static_cast<std::size_t>(in));
    Rng rng(derive_stream(seed, "init_layer", l));
    const double s = std::sqrt(6.0 / (in + out));
    for (double& v : w.data) v = rng.uniform(-s, s);
    params.weights.push_back(std::move(w));
    params.biases.emplace_back(static_cast<std::size_t>(out), 0.0);
  }
  return params;
}

std::vector<double> forward_logits(const ModelParams& params, std::span<const double> input) {
  if (input.size() != static_cast<std::size_t>(params.arch.input_dim()))
    throw DataError("forward: input dimension " + std::to_string(input.size()) +
                    " does not match arch input dim " + std::to_string(params.arch.input_dim()));
  std::vector<double> current(input.begin(), input.end());
  std::vector<double> next;
  const std::size_t layers = params.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const Matrix& w = params.weights[l];
    next.assign(w.rows, 0.0);
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double* wr = w.row(o);
      double acc = params.biases[l][o];
      for (std::size_t i = 0; i < w.cols; ++i) acc += wr[i] * current[i];
      next[o] = acc;
    }
    if (l + 1 < layers) {
      for (double& v : next) v = activate(params.arch.activation, v);
    }
    current.swap(next);
  }
  return current;
}

std::vector<double> forward(const ModelParams& params, std::span<const double> input) {
  return softmax(forward_logits(params, input));
}

Matrix forward_logits_batch(const ModelParams& params, const Matrix& inputs, unsigned jobs) {
  if (inputs.cols != static_cast<std::size_t>(params.arch.input_dim()))
    throw DataError("forward: input dimension " + std::to_string(inputs.cols) +
                    " does not match arch input dim " + std::to_string(params.arch.input_dim()));
  Matrix logits(inputs.rows, static_cast<std::size_t>(params.arch.num_classes));
  constexpr std::size_t kChunk = 1024;
  const std::size_t chunks = (inputs.rows + kChunk - 1) / kChunk;
  parallel_for(chunks, jobs, [&](std::size_t ci) {
    const std::size_t begin = ci * kChunk;
    const std::size_t end = std::min(begin + kChunk, inputs.rows);
    for (std::size_t r = begin; r < end; ++r) {
      const auto row_logits = forward_logits(params, inputs.row_span(r));
      std::copy(row_logits.begin(), row_logits.end(), logits.row(r));
    }
  });
  return logits;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  double mx = out[0];
  for (double v : out) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : out) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> softmax_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax_temperature: temperature must be > 0");
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& v : scaled) v /= temperature;
  return softmax(scaled);
}

double ce_loss(std::span<const double> posterior, std::span<const double> target) {
  double loss = 0.0;
  for (std::size_t c = 0; c < posterior.size(); ++c) {
    if (target[c] == 0.0) continue;
    loss -= target[c] * std::log(std::max(posterior[c], kLogClamp));
  }
  return loss;
}

double ce_loss_sparse(std::span<const double> posterior, std::span<const std::int32_t> classes,
                      std::span<const double> probs) {
  double loss = 0.0;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    loss -= probs[k] * std::log(std::max(posterior[static_cast<std::size_t>(classes[k])], kLogClamp));
  }
  return loss;
}

Gradients backward(const ModelParams& params, const Matrix& inputs, const Targets& targets) {
  if (inputs.rows != targets.size()) throw DataError("backward: inputs and targets disagree");
  if (inputs.rows == 0) throw DataError("backward: empty batch");
  BatchWorkspace ws;
  Gradients grads;
  forward_backward(params, inputs, targets, 0, grads.weights, grads.biases, ws);
  return grads;
}

namespace detail {

void sgd_step(ModelParams& params, const Matrix& batch_inputs, const Targets& batch_targets,
              double lr, double* loss_sum) {
  thread_local BatchWorkspace ws;
  thread_local std::vector<Matrix> grad_w;
  thread_local std::vector<std::vector<double>> grad_b;
  const double batch_loss = forward_backward(params, batch_inputs, batch_targets, 0, grad_w, grad_b, ws);
  if (loss_sum) *loss_sum += batch_loss;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    double* w = params.weights[l].data.data();
    const double* g = grad_w[l].data.data();
    for (std::size_t i = 0; i < params.weights[l].data.size(); ++i) w[i] -= lr * g[i];
    for (std::size_t o = 0; o < params.biases[l].size(); ++o) params.biases[l][o] -= lr * grad_b[l][o];
  }
}

}  // namespace detail

TrainResult train(ModelParams params, const Dataset& data, const TrainSchedule& schedule) {
  validate(schedule);
  if (data.empty()) throw DataError("train: empty training data");
  if (data.inputs.rows != data.targets.size())
    throw DataError("train: inputs and targets disagree");

  const std::size_t n = data.inputs.rows;
  std::vector<std::size_t> order(n);
  Matrix batch_inputs;
  Targets batch_targets;

  TrainResult result;
  result.loss_trace.reserve(static_cast<std::size_t>(schedule.epochs));
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_stream(schedule.seed, "train_epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double loss_sum = 0.0;
    const auto bs = static_cast<std::size_t>(schedule.batch_size);
    for (std::size_t begin = 0; begin < n; begin += bs) {
      const std::size_t end = std::min(begin + bs, n);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      gather_rows(data.inputs, idx, batch_inputs);
      gather_targets(data.targets, idx, batch_targets);
      try {
        detail::sgd_step(params, batch_inputs, batch_targets, lr, &loss_sum);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")");
      }
    }
    const double epoch_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(epoch_loss))
      throw NumericError("training diverged at epoch " + std::to_string(epoch));
    result.loss_trace.push_back(epoch_loss);
  }
  result.params = std::move(params);
  return result;
}

int argmax_class(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

double frame_error_rate(const ModelParams& params, const Matrix& inputs,
                        std::span<const std::int32_t> labels, unsigned jobs) {
  if (inputs.rows == 0) throw DataError("frame_error_rate: empty test set");
  if (inputs.rows != labels.size())
    throw DataError("frame_error_rate: frames and labels disagree");
  const Matrix logits = forward_logits_batch(params, inputs, jobs);
  std::int64_t errors = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    if (argmax_class(logits.row_span(r)) != labels[r]) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(inputs.rows);
}

double frame_error_rate(const ModelParams& params, const Dataset& labeled, unsigned jobs) {
  std::vector<std::int32_t> labels;
  labels.reserve(labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto cls = labeled.targets.classes_of(i);
    if (cls.size() != 1) throw DataError("frame_error_rate: targets must be hard labels");
    labels.push_back(cls[0]);
  }
  return frame_error_rate(params, labeled.inputs, labels, jobs);
}

void save_checkpoint(const ModelParams& params, const TrainSchedule& schedule,
                     const std::filesystem::path& path) {
  std::ostringstream out;
  out << "dlab-checkpoint 1\n";
  out << "name " << (params.arch.name.empty() ? "-" : params.arch.name) << "\n";
  out << "feature-dim " << params.arch.feature_dim << "\n";
  out << "window " << params.arch.window.left_context << " " << params.arch.window.right_context
      << " " << params.arch.window.subsample_factor << "\n";
  out << "hidden";
  for (const int w : params.arch.hidden_layers) out << " " << w;
  out << "\n";
  out << "classes " << params.arch.num_classes << "\n";
  out << "activation " << to_string(params.arch.activation) << "\n";
  out << "schedule " << schedule.epochs << " " << fmt_double(schedule.initial_lr) << " "
      << fmt_double(schedule.decay_gamma) << " " << schedule.batch_size << " " << schedule.seed
      << "\n";
  out << "params " << params.param_count() << "\n";
  for (const auto& w : params.weights) {
    for (const double v : w.data) out << f64_to_hex(v) << "\n";
  }
  for (const auto& b : params.biases) {
    for (const double v : b) out << f64_to_hex(v) << "\n";
  }
  atomic_write_file(path, out.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  const std::string context = "checkpoint " + path.string();
  std::string word;
  auto expect = [&](const std::string& key) {
    if (!(in >> word) || word != key) throw DataError(context + ": expected '" + key + "'");
  };
  expect("dlab-checkpoint");
  int version = 0;
  in >> version;
  if (version != 1) throw DataError(context + ": unsupported version");

  Checkpoint ckpt;
  ArchSpec& arch = ckpt.params.arch;
  expect("name");
  in >> arch.name;
  if (arch.name == "-") arch.name.clear();
  expect("feature-dim");
  in >> arch.feature_dim;
  expect("window");
  in >> arch.window.left_context >> arch.window.right_context >> arch.window.subsample_factor;
  expect("hidden");
  {
    std::string line;
    std::getline(in, line);
    std::istringstream widths(line);
    int w;
    while (widths >> w) arch.hidden_layers.push_back(w);
  }
  expect("classes");
  in >> arch.num_classes;
  expect("activation");
  in >> word;
  arch.activation = activation_from_string(word);
  expect("schedule");
  in >> ckpt.schedule.epochs >> ckpt.schedule.initial_lr >> ckpt.schedule.decay_gamma >>
      ckpt.schedule.batch_size >> ckpt.schedule.seed;
  expect("params");
  std::int64_t count = 0;
  in >> count;
  if (!in) throw DataError(context + ": malformed header");

  validate(arch);
  const auto shapes = arch.layer_shapes();
  for (const auto& [out, in_dim] : shapes) {
    ckpt.params.weights.emplace_back(static_cast<std::size_t>(out), static_cast<std::size_t>(in_dim));
    ckpt.params.biases.emplace_back(static_cast<std::size_t>(out), 0.0);
  }
  if (ckpt.params.param_count() != count)
    throw DataError(context + ": parameter count does not match arch shapes");
  auto read_value = [&]() {
    if (!(in >> word)) throw DataError(context + ": missing parameter values");
    return f64_from_hex(word);
  };
  for (auto& w : ckpt.params.weights) {
    for (double& v : w.data) v = read_value();
  }
  for (auto& b : ckpt.params.biases) {
    for (double& v : b) v = read_value();
  }
  return ckpt;
}

}  // namespace dlab::net
