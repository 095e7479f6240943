// SPDX-License-Identifier: Apache-2.0
#include "dlab/datagen.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/parallel.hpp"
#include "dlab/rng.hpp"

namespace dlab::data {

namespace {

using nlohmann::json;

constexpr double kRowSumTol = 1e-12;

// Strongly connected components of the transition sparsity pattern
// (iterative Kosaraju). Returns the component id per state.
std::vector<int> scc_ids(const Matrix& t, int n, int& num_components) {
  std::vector<std::vector<int>> fwd(n), rev(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (t(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) > 0.0) {
        fwd[i].push_back(j);
        rev[j].push_back(i);
      }
    }
  }
  std::vector<int> order;
  order.reserve(n);
  std::vector<char> seen(n, 0);
  for (int s = 0; s < n; ++s) {
    if (seen[s]) continue;
    std::vector<std::pair<int, std::size_t>> stack{{s, 0}};
    seen[s] = 1;
    while (!stack.empty()) {
      auto& [v, next] = stack.back();
      if (next < fwd[v].size()) {
        const int w = fwd[v][next++];
        if (!seen[w]) {
          seen[w] = 1;
          stack.emplace_back(w, 0);
        }
      } else {
        order.push_back(v);
        stack.pop_back();
      }
    }
  }
  std::vector<int> comp(n, -1);
  num_components = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (comp[*it] >= 0) continue;
    std::vector<int> stack{*it};
    comp[*it] = num_components;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int w : rev[v]) {
        if (comp[w] < 0) {
          comp[w] = num_components;
          stack.push_back(w);
        }
      }
    }
    ++num_components;
  }
  return comp;
}

int count_closed_classes(const Matrix& t, int n) {
  int num_components = 0;
  const std::vector<int> comp = scc_ids(t, n, num_components);
  std::vector<char> closed(num_components, 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (t(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) > 0.0 && comp[i] != comp[j]) {
        closed[comp[i]] = 0;
      }
    }
  }
  int count = 0;
  for (char c : closed) count += c;
  return count;
}

int sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

std::string utterance_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "u%06zu", index);
  return buf;
}

Utterance generate_utterance(const HmmSpec& spec, std::span<const double> stationary,
                             std::pair<int, int> length_range, std::uint64_t seed,
                             std::size_t index) {
  Rng rng(derive_stream(seed, "utt", index));
  const int T = static_cast<int>(rng.int_in(length_range.first, length_range.second));
  const int d = spec.feature_dim;

  Utterance utt;
  utt.id = utterance_id(index);
  utt.labels.resize(T);
  utt.frames = Matrix(static_cast<std::size_t>(T), static_cast<std::size_t>(d));

  int state = sample_categorical(stationary, rng);
  for (int t = 0; t < T; ++t) {
    utt.labels[t] = state;
    state = sample_categorical(spec.transition.row_span(static_cast<std::size_t>(state)), rng);
  }
  for (int t = 0; t < T; ++t) {
    const int s = utt.labels[t];
    for (int j = 0; j < d; ++j) {
      utt.frames(t, j) = rng.normal(spec.emission_means(s, j), spec.emission_stddevs(s, j));
    }
  }

  // Per-utterance global mean/variance normalization per dimension.
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int t = 0; t < T; ++t) mean += utt.frames(t, j);
    mean /= T;
    double var = 0.0;
    for (int t = 0; t < T; ++t) {
      const double c = utt.frames(t, j) - mean;
      var += c * c;
    }
    var /= T;
    const double inv = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    for (int t = 0; t < T; ++t) utt.frames(t, j) = (utt.frames(t, j) - mean) * inv;
  }
  return utt;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < m.cols; ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw DataError(what + ": expected a non-empty array of rows");
  Matrix m(j.size(), j[0].size());
  for (std::size_t r = 0; r < m.rows; ++r) {
    if (j[r].size() != m.cols) throw DataError(what + ": ragged rows");
    for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

}  // namespace

void validate(const HmmSpec& spec) {
  if (spec.num_states < 2) throw ConfigError("HmmSpec.num_states: must be >= 2");
  if (spec.feature_dim < 1) throw ConfigError("HmmSpec.feature_dim: must be >= 1");
  if (spec.self_loop_bias < 0.0 || spec.self_loop_bias >= 1.0)
    throw ConfigError("HmmSpec.self_loop_bias: must be in [0, 1)");
  const auto n = static_cast<std::size_t>(spec.num_states);
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  if (spec.transition.rows != n || spec.transition.cols != n)
    throw ConfigError("HmmSpec.transition: shape must be num_states x num_states");
  if (spec.emission_means.rows != n || spec.emission_means.cols != d)
    throw ConfigError("HmmSpec.emission_means: shape must be num_states x feature_dim");
  if (spec.emission_stddevs.rows != n || spec.emission_stddevs.cols != d)
    throw ConfigError("HmmSpec.emission_stddevs: shape must be num_states x feature_dim");
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double v = spec.transition(r, c);
      if (v < 0.0)
        throw ConfigError("HmmSpec.transition: negative entry at row " + std::to_string(r));
      sum += v;
    }
    if (std::abs(sum - 1.0) > kRowSumTol)
      throw ConfigError("HmmSpec.transition: row " + std::to_string(r) +
                        " sums to " + fmt_double(sum) + ", not 1");
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      if (!(spec.emission_stddevs(r, c) > 0.0))
        throw ConfigError("HmmSpec.emission_stddevs: non-positive entry at state " +
                          std::to_string(r) + ", dim " + std::to_string(c));
    }
  }
}

std::vector<double> stationary_distribution(const HmmSpec& spec) {
  validate(spec);
  const int n = spec.num_states;
  const int closed = count_closed_classes(spec.transition, n);
  if (closed != 1) {
    throw ConfigError("HmmSpec.transition: stationary distribution is not unique (" +
                      std::to_string(closed) + " closed communicating classes)");
  }
  // Solve pi^T T = pi^T with the normalization sum(pi) = 1 appended as an
  // extra row; the system is consistent, so least squares returns the
  // exact solution.
  Eigen::MatrixXd a(n + 1, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      a(i, j) = spec.transition(static_cast<std::size_t>(j), static_cast<std::size_t>(i));
    }
    a(i, i) -= 1.0;
  }
  for (int j = 0; j < n; ++j) a(n, j) = 1.0;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n + 1);
  b(n) = 1.0;
  const Eigen::VectorXd pi = a.colPivHouseholderQr().solve(b);

  std::vector<double> result(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    result[static_cast<std::size_t>(i)] = std::max(0.0, pi(i));
    sum += result[static_cast<std::size_t>(i)];
  }
  for (double& v : result) v /= sum;
  return result;
}

HmmSpec make_hmm(int num_states, int feature_dim, double self_loop_bias, double mean_scale,
                 double stddev_min, double stddev_max, double next_state_weight,
                 std::uint64_t seed) {
  if (num_states < 2) throw ConfigError("make_hmm: num_states must be >= 2");
  if (next_state_weight < 0.0 || next_state_weight > 1.0)
    throw ConfigError("make_hmm: next_state_weight must be in [0, 1]");
  if (!(stddev_min > 0.0) || stddev_max < stddev_min)
    throw ConfigError("make_hmm: stddev bounds must satisfy 0 < stddev_min <= stddev_max");

  HmmSpec spec;
  spec.num_states = num_states;
  spec.feature_dim = feature_dim;
  spec.self_loop_bias = self_loop_bias;
  const auto n = static_cast<std::size_t>(num_states);
  const auto d = static_cast<std::size_t>(feature_dim);
  spec.transition = Matrix(n, n);
  spec.emission_means = Matrix(n, d);
  spec.emission_stddevs = Matrix(n, d);

  Rng trans_rng(derive_stream(seed, "hmm_transition"));
  for (std::size_t i = 0; i < n; ++i) {
    // Off-diagonal mass: mostly the cyclic successor, the rest random.
    std::vector<double> off(n, 0.0);
    const std::size_t succ = (i + 1) % n;
    double rest = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double w = trans_rng.uniform();
      off[j] = w * w;  // sharpen so a few successors dominate
      rest += off[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      off[j] = next_state_weight * (j == succ ? 1.0 : 0.0) +
               (1.0 - next_state_weight) * off[j] / rest;
    }
    for (std::size_t j = 0; j < n; ++j) {
      spec.transition(i, j) =
          (i == j ? self_loop_bias : 0.0) + (1.0 - self_loop_bias) * off[j];
    }
    // Force the row to sum to 1 exactly within tolerance.
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += spec.transition(i, j);
    for (std::size_t j = 0; j < n; ++j) spec.transition(i, j) /= sum;
  }

  Rng emit_rng(derive_stream(seed, "hmm_emissions"));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      spec.emission_means(i, j) = mean_scale * emit_rng.normal();
      spec.emission_stddevs(i, j) = emit_rng.uniform(stddev_min, stddev_max);
    }
  }
  validate(spec);
  return spec;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::supervised: return "supervised";
    case Split::unsupervised: return "unsupervised";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "supervised") return Split::supervised;
  if (s == "unsupervised") return Split::unsupervised;
  if (s == "test") return Split::test;
  throw DataError("unknown split name: '" + s + "'");
}

Corpus::Corpus(HmmSpec spec, std::vector<Utterance> utterances, std::vector<Split> splits,
               std::uint64_t seed)
    : spec_(std::move(spec)),
      utterances_(std::move(utterances)),
      splits_(std::move(splits)),
      seed_(seed) {
  if (splits_.size() != utterances_.size())
    throw DataError("Corpus: split assignment must cover all utterances");
}

std::optional<std::span<const std::int32_t>> Corpus::labels(std::size_t i) const {
  if (splits_[i] == Split::unsupervised) return std::nullopt;
  return std::span<const std::int32_t>(utterances_[i].labels);
}

std::span<const std::int32_t> Corpus::oracle_labels(std::size_t i) const {
  if (splits_[i] == Split::unsupervised) ++unsup_oracle_reads_;
  return utterances_[i].labels;
}

std::uint64_t Corpus::unsupervised_oracle_reads() const { return unsup_oracle_reads_; }

std::vector<std::size_t> Corpus::split_indices(Split s) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < utterances_.size(); ++i) {
    if (splits_[i] == s) idx.push_back(i);
  }
  return idx;
}

std::int64_t Corpus::total_frames() const {
  std::int64_t total = 0;
  for (const auto& u : utterances_) total += static_cast<std::int64_t>(u.frames.rows);
  return total;
}

std::int64_t Corpus::split_frames(Split s) const {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < utterances_.size(); ++i) {
    if (splits_[i] == s) total += static_cast<std::int64_t>(utterances_[i].frames.rows);
  }
  return total;
}

double Corpus::hours_equivalent() const { return static_cast<double>(total_frames()) / kFramesPerHour; }

double Corpus::hours_of(Split s) const {
  return static_cast<double>(split_frames(s)) / kFramesPerHour;
}

Corpus generate_corpus(const HmmSpec& spec, int num_utterances,
                       std::pair<int, int> length_range, std::uint64_t seed, unsigned jobs) {
  validate(spec);
  if (num_utterances < 1) throw ConfigError("generate_corpus: num_utterances must be >= 1");
  if (length_range.first < 1 || length_range.second < length_range.first)
    throw ConfigError("generate_corpus: length range must satisfy 1 <= min_T <= max_T");

  const std::vector<double> stationary = stationary_distribution(spec);
  std::vector<Utterance> utts(static_cast<std::size_t>(num_utterances));
  parallel_for(utts.size(), jobs, [&](std::size_t i) {
    utts[i] = generate_utterance(spec, stationary, length_range, seed, i);
  });
  std::vector<Split> splits(utts.size(), Split::supervised);
  return Corpus(spec, std::move(utts), std::move(splits), seed);
}

Corpus split_corpus(const Corpus& corpus, double supervised_hours, double unsupervised_hours,
                    double test_hours, std::uint64_t seed) {
  if (supervised_hours < 0 || unsupervised_hours < 0 || test_hours < 0)
    throw ConfigError("split_corpus: requested hours must be non-negative");
  const double available = corpus.hours_equivalent();
  const double requested = supervised_hours + unsupervised_hours + test_hours;
  if (requested > available + 1e-9) {
    throw DataError("split_corpus: requested " + fmt_double(requested) +
                    " hours but corpus has " + fmt_double(available));
  }

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_stream(seed, "split_shuffle"));
  rng.shuffle(order);

  const double requests[3] = {supervised_hours, unsupervised_hours, test_hours};
  const Split kinds[3] = {Split::supervised, Split::unsupervised, Split::test};

  std::vector<Utterance> kept;
  std::vector<Split> kept_splits;
  std::size_t pos = 0;
  for (int k = 0; k < 3; ++k) {
    double achieved = 0.0;
    while (achieved + 1e-12 < requests[k] && pos < order.size()) {
      const Utterance& u = corpus.storage_utterance(order[pos]);
      kept.push_back(u);
      kept_splits.push_back(kinds[k]);
      achieved += static_cast<double>(u.frames.rows) / kFramesPerHour;
      ++pos;
    }
  }
  return Corpus(corpus.spec(), std::move(kept), std::move(kept_splits), seed);
}

void validate(const WindowSpec& window) {
  if (window.left_context < 0) throw ConfigError("WindowSpec.left_context: must be >= 0");
  if (window.right_context < 0) throw ConfigError("WindowSpec.right_context: must be >= 0");
  if (window.subsample_factor < 1) throw ConfigError("WindowSpec.subsample_factor: must be >= 1");
}

std::vector<std::int32_t> kept_centers(std::int64_t num_frames, int subsample_factor) {
  std::vector<std::int32_t> centers;
  for (std::int64_t t = 0; t < num_frames; t += subsample_factor) {
    centers.push_back(static_cast<std::int32_t>(t));
  }
  return centers;
}

Matrix stack_inputs(const Matrix& frames, const WindowSpec& window) {
  validate(window);
  const auto centers = kept_centers(static_cast<std::int64_t>(frames.rows), window.subsample_factor);
  const std::size_t d = frames.cols;
  const int span = window.left_context + window.right_context + 1;
  Matrix out(centers.size(), static_cast<std::size_t>(span) * d);
  const auto last = static_cast<std::int64_t>(frames.rows) - 1;
  for (std::size_t r = 0; r < centers.size(); ++r) {
    double* dst = out.row(r);
    for (int o = -window.left_context; o <= window.right_context; ++o) {
      const std::int64_t t = std::clamp<std::int64_t>(centers[r] + o, 0, last);
      const double* src = frames.row(static_cast<std::size_t>(t));
      std::copy(src, src + d, dst);
      dst += d;
    }
  }
  return out;
}

StackedUtterance stack_frames(const Utterance& utt, const WindowSpec& window) {
  StackedUtterance out;
  out.centers = kept_centers(static_cast<std::int64_t>(utt.frames.rows), window.subsample_factor);
  out.frames = stack_inputs(utt.frames, window);
  out.labels.reserve(out.centers.size());
  for (const std::int32_t c : out.centers) out.labels.push_back(utt.labels[static_cast<std::size_t>(c)]);
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["schema_version"] = 1;
  manifest["seed"] = corpus.seed();
  json hmm;
  hmm["num_states"] = corpus.spec().num_states;
  hmm["feature_dim"] = corpus.spec().feature_dim;
  hmm["self_loop_bias"] = corpus.spec().self_loop_bias;
  hmm["transition"] = matrix_to_json(corpus.spec().transition);
  hmm["emission_means"] = matrix_to_json(corpus.spec().emission_means);
  hmm["emission_stddevs"] = matrix_to_json(corpus.spec().emission_stddevs);
  manifest["hmm"] = std::move(hmm);
  json utts = json::array();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    utts.push_back({{"id", corpus.id(i)}, {"split", to_string(corpus.split_of(i))}});
  }
  manifest["utterances"] = std::move(utts);
  atomic_write_file(dir / "spec.json", manifest.dump(2) + "\n");

  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Utterance& u = corpus.storage_utterance(i);
    std::string bytes;
    bytes += "DLAB";
    bytes.push_back(static_cast<char>(1));  // version
    put_u32(bytes, static_cast<std::uint32_t>(u.frames.rows));
    put_u32(bytes, static_cast<std::uint32_t>(u.frames.cols));
    for (double v : u.frames.data) put_f64(bytes, v);
    for (std::int32_t l : u.labels) put_u32(bytes, static_cast<std::uint32_t>(l));
    atomic_write_file(dir / (u.id + ".bin"), bytes);
  }
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_file(dir / "spec.json"));
  HmmSpec spec;
  const json& hmm = manifest.at("hmm");
  spec.num_states = hmm.at("num_states").get<int>();
  spec.feature_dim = hmm.at("feature_dim").get<int>();
  spec.self_loop_bias = hmm.at("self_loop_bias").get<double>();
  spec.transition = matrix_from_json(hmm.at("transition"), "transition");
  spec.emission_means = matrix_from_json(hmm.at("emission_means"), "emission_means");
  spec.emission_stddevs = matrix_from_json(hmm.at("emission_stddevs"), "emission_stddevs");
  validate(spec);

  std::vector<Utterance> utts;
  std::vector<Split> splits;
  for (const json& entry : manifest.at("utterances")) {
    const std::string id = entry.at("id").get<std::string>();
    splits.push_back(split_from_string(entry.at("split").get<std::string>()));
    const std::string bytes = read_file(dir / (id + ".bin"));
    ByteReader reader(bytes, "corpus file " + id + ".bin");
    if (reader.raw(4) != "DLAB") throw DataError("corpus file " + id + ".bin: bad magic");
    const std::uint8_t version = reader.u8();
    if (version != 1) throw DataError("corpus file " + id + ".bin: unsupported version");
    const std::uint32_t t = reader.u32();
    const std::uint32_t d = reader.u32();
    Utterance u;
    u.id = id;
    u.frames = Matrix(t, d);
    for (double& v : u.frames.data) v = reader.f64();
    u.labels.resize(t);
    for (std::int32_t& l : u.labels) l = static_cast<std::int32_t>(reader.u32());
    if (!reader.done()) throw DataError("corpus file " + id + ".bin: trailing bytes");
    utts.push_back(std::move(u));
  }
  return Corpus(std::move(spec), std::move(utts), std::move(splits),
                manifest.at("seed").get<std::uint64_t>());
}

std::uint64_t corpus_content_hash(const Corpus& corpus) {
  std::uint64_t h = kFnvOffset;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Utterance& u = corpus.storage_utterance(i);
    h = fnv64(u.id, h);
    h = fnv64(to_string(corpus.split_of(i)), h);
    for (double v : u.frames.data) h = fnv64_u64(std::bit_cast<std::uint64_t>(v), h);
    for (std::int32_t l : u.labels) h = fnv64_u64(static_cast<std::uint64_t>(l), h);
  }
  return h;
}

}  // namespace dlab::data
