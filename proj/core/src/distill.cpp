// SPDX-License-Identifier: Apache-2.0
#include "dlab/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/parallel.hpp"
#include "dlab/rng.hpp"

namespace dlab::distill {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'T', 'B'};

struct UttCandidates {
  std::vector<std::uint32_t> centers;
  std::vector<double> confidences;
  std::vector<std::vector<double>> posteriors;
};

}  // namespace

void validate(const SelectionPolicy& policy) {
  if (policy.min_confidence < 0.0 || policy.min_confidence > 1.0)
    throw ConfigError("SelectionPolicy.min_confidence: must be in [0, 1]");
  if (!(policy.max_fraction > 0.0) || policy.max_fraction > 1.0)
    throw ConfigError("SelectionPolicy.max_fraction: must be in (0, 1]");
}

void validate(const MixWeight& mix) {
  if (mix.lambda < 0.0 || mix.lambda > 1.0)
    throw ConfigError("MixWeight.lambda: must be in [0, 1]");
}

CompressedPosterior compress_posterior(std::span<const double> posterior, int k, int quant_bits) {
  if (posterior.empty()) throw DataError("compress_posterior: empty posterior");
  if (k < 1) throw ConfigError("compress_posterior: k must be >= 1");
  if (quant_bits < 2 || quant_bits > 16)
    throw ConfigError("compress_posterior: quant_bits must be in [2, 16]");
  const int c = static_cast<int>(posterior.size());
  const int kept = std::min(k, c);

  std::vector<int> idx(posterior.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + kept, idx.end(), [&](int a, int b) {
    if (posterior[static_cast<std::size_t>(a)] != posterior[static_cast<std::size_t>(b)])
      return posterior[static_cast<std::size_t>(a)] > posterior[static_cast<std::size_t>(b)];
    return a < b;  // ties to the lower class index
  });

  double mass = 0.0;
  for (int i = 0; i < kept; ++i) mass += posterior[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];

  CompressedPosterior entry;
  entry.quant_bits = quant_bits;
  entry.num_classes = c;
  entry.classes.reserve(static_cast<std::size_t>(kept));
  entry.codes.reserve(static_cast<std::size_t>(kept));
  const double max_code = static_cast<double>((1u << quant_bits) - 1u);
  for (int i = 0; i < kept; ++i) {
    const int cls = idx[static_cast<std::size_t>(i)];
    const double p = posterior[static_cast<std::size_t>(cls)] / mass;
    entry.classes.push_back(static_cast<std::uint16_t>(cls));
    entry.codes.push_back(static_cast<std::uint16_t>(std::llround(p * max_code)));
  }
  if (entry.codes[0] == 0) entry.codes[0] = 1;  // keep the entry decodable
  return entry;
}

std::vector<double> decompress(const CompressedPosterior& entry) {
  if (entry.classes.size() != entry.codes.size() || entry.classes.empty())
    throw DataError("decompress: malformed entry");
  if (entry.quant_bits < 2 || entry.quant_bits > 16)
    throw DataError("decompress: quant_bits out of range");
  const std::uint32_t max_code = (1u << entry.quant_bits) - 1u;
  std::vector<double> out(static_cast<std::size_t>(entry.num_classes), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < entry.classes.size(); ++i) {
    const std::uint16_t cls = entry.classes[i];
    if (cls >= entry.num_classes)
      throw DataError("decompress: class " + std::to_string(cls) + " out of range");
    if (entry.codes[i] > max_code)
      throw DataError("decompress: code overflow at class " + std::to_string(cls));
    if (out[cls] != 0.0) throw DataError("decompress: duplicate class " + std::to_string(cls));
    out[cls] = static_cast<double>(entry.codes[i]) / static_cast<double>(max_code);
    sum += out[cls];
  }
  if (sum <= 0.0) throw DataError("decompress: entry has zero mass");
  for (double& v : out) v /= sum;
  return out;
}

double SoftTargetBatch::kept_fraction() const {
  return frames_scanned == 0 ? 0.0
                             : static_cast<double>(size()) / static_cast<double>(frames_scanned);
}

double SoftTargetBatch::hours_equivalent() const {
  return static_cast<double>(size()) * subsample_factor / data::kFramesPerHour;
}

std::span<const std::uint16_t> SoftTargetBatch::classes_of(std::size_t i) const {
  return {entry_classes.data() + i * static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
}

std::span<const std::uint16_t> SoftTargetBatch::codes_of(std::size_t i) const {
  return {entry_codes.data() + i * static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
}

CompressedPosterior SoftTargetBatch::entry(std::size_t i) const {
  CompressedPosterior e;
  const auto cls = classes_of(i);
  const auto cds = codes_of(i);
  e.classes.assign(cls.begin(), cls.end());
  e.codes.assign(cds.begin(), cds.end());
  e.quant_bits = quant_bits;
  e.num_classes = num_classes;
  return e;
}

SoftTargetBatch teacher_label(const net::ModelParams& teacher, const data::Corpus& corpus,
                              const SelectionPolicy& policy, int k, int quant_bits,
                              double temperature, unsigned jobs) {
  validate(policy);
  const int num_classes = teacher.arch.num_classes;
  if (k < 1 || k > num_classes)
    throw ConfigError("teacher_label: k must be in [1, num_classes]");
  if (quant_bits < 2 || quant_bits > 16)
    throw ConfigError("teacher_label: quant_bits must be in [2, 16]");
  if (!(temperature > 0.0)) throw ConfigError("teacher_label: temperature must be > 0");
  if (teacher.arch.feature_dim != corpus.spec().feature_dim)
    throw ConfigError("teacher_label: teacher feature_dim does not match corpus");
  if (num_classes != corpus.spec().num_states)
    throw ConfigError("teacher_label: teacher num_classes does not match corpus num_states");

  const std::vector<std::size_t> utts = corpus.split_indices(data::Split::unsupervised);
  std::vector<UttCandidates> per_utt(utts.size());
  parallel_for(utts.size(), jobs, [&](std::size_t ui) {
    const Matrix stacked = data::stack_inputs(corpus.frames(utts[ui]), teacher.arch.window);
    const Matrix logits = net::forward_logits_batch(teacher, stacked);
    UttCandidates& cand = per_utt[ui];
    cand.centers.reserve(logits.rows);
    cand.posteriors.reserve(logits.rows);
    for (std::size_t r = 0; r < logits.rows; ++r) {
      std::vector<double> posterior = net::softmax_temperature(logits.row_span(r), temperature);
      const double conf = *std::max_element(posterior.begin(), posterior.end());
      cand.centers.push_back(static_cast<std::uint32_t>(r) *
                             static_cast<std::uint32_t>(teacher.arch.window.subsample_factor));
      cand.confidences.push_back(conf);
      cand.posteriors.push_back(std::move(posterior));
    }
  });

  std::uint64_t scanned = 0;
  for (const auto& cand : per_utt) scanned += cand.centers.size();

  // Threshold, then cap at max_fraction of the scan keeping the most
  // confident frames. Ties resolve by canonical (utterance, frame) order so
  // the result is deterministic.
  struct Ref {
    std::uint32_t utt;
    std::uint32_t row;
    double conf;
  };
  std::vector<Ref> kept;
  for (std::size_t ui = 0; ui < per_utt.size(); ++ui) {
    const auto& cand = per_utt[ui];
    for (std::size_t r = 0; r < cand.centers.size(); ++r) {
      if (cand.confidences[r] >= policy.min_confidence) {
        kept.push_back({static_cast<std::uint32_t>(ui), static_cast<std::uint32_t>(r),
                        cand.confidences[r]});
      }
    }
  }
  const auto cap = static_cast<std::size_t>(std::floor(policy.max_fraction * static_cast<double>(scanned)));
  if (kept.size() > cap) {
    std::stable_sort(kept.begin(), kept.end(), [](const Ref& a, const Ref& b) { return a.conf > b.conf; });
    kept.resize(cap);
    std::sort(kept.begin(), kept.end(), [](const Ref& a, const Ref& b) {
      return a.utt != b.utt ? a.utt < b.utt : a.row < b.row;
    });
  }

  SoftTargetBatch batch;
  batch.teacher_name = teacher.arch.name;
  batch.k = k;
  batch.quant_bits = quant_bits;
  batch.num_classes = num_classes;
  batch.subsample_factor = teacher.arch.window.subsample_factor;
  batch.frames_scanned = scanned;
  batch.utt_ids.reserve(utts.size());
  for (const std::size_t u : utts) batch.utt_ids.push_back(corpus.id(u));
  batch.ref_utt.reserve(kept.size());
  batch.ref_frame.reserve(kept.size());
  batch.entry_classes.reserve(kept.size() * static_cast<std::size_t>(k));
  batch.entry_codes.reserve(kept.size() * static_cast<std::size_t>(k));
  for (const Ref& ref : kept) {
    const auto& cand = per_utt[ref.utt];
    batch.ref_utt.push_back(ref.utt);
    batch.ref_frame.push_back(cand.centers[ref.row]);
    const CompressedPosterior entry = compress_posterior(cand.posteriors[ref.row], k, quant_bits);
    for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
      // entries are exactly k wide because k <= num_classes
      batch.entry_classes.push_back(entry.classes[i]);
      batch.entry_codes.push_back(entry.codes[i]);
    }
  }
  return batch;
}

SoftTargetBatch truncate_by_hours(const SoftTargetBatch& batch, double hours) {
  const double frame_hours = batch.subsample_factor / data::kFramesPerHour;
  const auto max_frames = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(batch.size()),
                       std::llround(hours / frame_hours)));
  SoftTargetBatch out = batch;
  out.ref_utt.resize(max_frames);
  out.ref_frame.resize(max_frames);
  out.entry_classes.resize(max_frames * static_cast<std::size_t>(batch.k));
  out.entry_codes.resize(max_frames * static_cast<std::size_t>(batch.k));
  return out;
}

double kd_loss(std::span<const double> student_posterior, const CompressedPosterior& soft_target,
               std::optional<int> hard_label, const MixWeight& mix) {
  validate(mix);
  const std::vector<double> soft = decompress(soft_target);
  const double soft_ce = net::ce_loss(student_posterior, soft);
  if (!hard_label.has_value()) return soft_ce;
  std::vector<double> one_hot(student_posterior.size(), 0.0);
  one_hot[static_cast<std::size_t>(*hard_label)] = 1.0;
  const double hard_ce = net::ce_loss(student_posterior, one_hot);
  return mix.lambda * soft_ce + (1.0 - mix.lambda) * hard_ce;
}

StudentResult train_student(const net::ArchSpec& student_arch, const net::Dataset& supervised,
                            const SoftTargetBatch& soft, const data::Corpus& corpus,
                            const MixWeight& mix, const net::TrainSchedule& schedule,
                            double sub_epoch_hours,
                            const std::optional<net::ModelParams>& initial) {
  validate(mix);
  net::validate(schedule);
  if (soft.empty() && supervised.empty())
    throw DataError("train_student: both the soft batch and the supervised set are empty");

  StudentResult result;
  net::ModelParams params = initial.has_value() ? *initial : net::init_params(student_arch, schedule.seed);

  // Pure-hard paths reduce exactly to the baseline trainer.
  if (soft.empty() || mix.lambda == 0.0) {
    if (supervised.empty()) throw DataError("train_student: lambda 0 with no supervised data");
    auto trained = net::train(std::move(params), supervised, schedule);
    result.params = std::move(trained.params);
    result.checkpoints.push_back({0.0, result.params});
    return result;
  }
  if (!(sub_epoch_hours > 0.0))
    throw ConfigError("train_student: sub_epoch_hours must be > 0");
  if (student_arch.window.subsample_factor != soft.subsample_factor)
    throw ConfigError("train_student: student subsample_factor does not match the soft batch");

  // Materialize student-window inputs at the soft refs. Refs address raw
  // center frames; both windows keep the same centers because they share the
  // subsample factor.
  std::unordered_map<std::string, std::size_t> utt_by_id;
  for (std::size_t i = 0; i < corpus.size(); ++i) utt_by_id[corpus.id(i)] = i;
  net::Dataset soft_data;
  soft_data.inputs = Matrix(soft.size(), static_cast<std::size_t>(student_arch.input_dim()));
  std::vector<std::int32_t> cls_buf;
  std::vector<double> prob_buf;
  std::size_t prev_utt = static_cast<std::size_t>(-1);
  Matrix stacked;
  for (std::size_t i = 0; i < soft.size(); ++i) {
    const std::string& id = soft.utt_ids[soft.ref_utt[i]];
    const auto it = utt_by_id.find(id);
    if (it == utt_by_id.end())
      throw DataError("train_student: soft batch references unknown utterance '" + id + "'");
    if (it->second != prev_utt) {
      stacked = data::stack_inputs(corpus.frames(it->second), student_arch.window);
      prev_utt = it->second;
    }
    const std::uint32_t center = soft.ref_frame[i];
    if (center % static_cast<std::uint32_t>(soft.subsample_factor) != 0)
      throw DataError("train_student: soft ref is not a kept center");
    const std::size_t row = center / static_cast<std::uint32_t>(soft.subsample_factor);
    if (row >= stacked.rows)
      throw DataError("train_student: soft ref out of range in utterance '" + id + "'");
    std::copy(stacked.row(row), stacked.row(row) + stacked.cols, soft_data.inputs.row(i));

    const std::vector<double> target = decompress(soft.entry(i));
    cls_buf.clear();
    prob_buf.clear();
    for (std::size_t c = 0; c < target.size(); ++c) {
      if (target[c] > 0.0) {
        cls_buf.push_back(static_cast<std::int32_t>(c));
        prob_buf.push_back(target[c]);
      }
    }
    soft_data.targets.add_soft(cls_buf, prob_buf);
  }

  const double frame_hours = soft.subsample_factor / data::kFramesPerHour;
  const auto chunk_frames = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(sub_epoch_hours / frame_hours)));

  std::vector<std::size_t> soft_order(soft.size());
  std::iota(soft_order.begin(), soft_order.end(), 0);
  {
    Rng rng(derive_stream(schedule.seed, "soft_shuffle"));
    rng.shuffle(soft_order);
  }

  const bool interleave = mix.lambda < 1.0 && !supervised.empty();
  std::vector<std::size_t> sup_order;
  std::size_t sup_pos = 0;
  std::uint64_t sup_wraps = 0;
  auto next_supervised = [&]() {
    if (sup_pos == sup_order.size()) {
      sup_order.resize(supervised.size());
      std::iota(sup_order.begin(), sup_order.end(), 0);
      Rng rng(derive_stream(schedule.seed, "sup_shuffle", sup_wraps++));
      rng.shuffle(sup_order);
      sup_pos = 0;
    }
    return sup_order[sup_pos++];
  };

  Matrix batch_inputs;
  net::Targets batch_targets;
  double cumulative_hours = 0.0;
  const std::size_t num_chunks = (soft.size() + chunk_frames - 1) / chunk_frames;
  for (std::size_t chunk = 0; chunk < num_chunks; ++chunk) {
    const std::size_t begin = chunk * chunk_frames;
    const std::size_t end = std::min(begin + chunk_frames, soft.size());
    const std::size_t n_soft = end - begin;

    // Pool = this chunk's soft frames plus interleaved hard frames at a
    // (1-lambda):lambda ratio. Entries are (is_hard, index).
    std::vector<std::pair<char, std::size_t>> pool;
    pool.reserve(n_soft * 2);
    for (std::size_t i = begin; i < end; ++i) pool.emplace_back(0, soft_order[i]);
    if (interleave) {
      const auto n_hard = static_cast<std::size_t>(
          std::llround(static_cast<double>(n_soft) * (1.0 - mix.lambda) / mix.lambda));
      for (std::size_t i = 0; i < n_hard; ++i) pool.emplace_back(1, next_supervised());
    }
    {
      Rng rng(derive_stream(schedule.seed, "chunk_shuffle", chunk));
      rng.shuffle(pool);
    }

    const double lr = net::lr_at(schedule, static_cast<int>(chunk));
    const auto bs = static_cast<std::size_t>(schedule.batch_size);
    for (std::size_t b = 0; b < pool.size(); b += bs) {
      const std::size_t be = std::min(b + bs, pool.size());
      batch_inputs = Matrix(be - b, soft_data.inputs.cols);
      batch_targets.offsets.assign(1, 0);
      batch_targets.classes.clear();
      batch_targets.probs.clear();
      for (std::size_t i = b; i < be; ++i) {
        const auto [is_hard, idx] = pool[i];
        const Matrix& src = is_hard ? supervised.inputs : soft_data.inputs;
        const net::Targets& tsrc = is_hard ? supervised.targets : soft_data.targets;
        std::copy(src.row(idx), src.row(idx) + src.cols, batch_inputs.row(i - b));
        batch_targets.add_soft(tsrc.classes_of(idx), tsrc.probs_of(idx));
      }
      try {
        net::detail::sgd_step(params, batch_inputs, batch_targets, lr, nullptr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (sub-epoch " + std::to_string(chunk) + ")");
      }
    }

    cumulative_hours += static_cast<double>(n_soft) * frame_hours;
    result.checkpoints.push_back({cumulative_hours, params});
  }
  result.params = std::move(params);
  return result;
}

void save_soft_targets(const SoftTargetBatch& batch, const std::filesystem::path& path) {
  std::string bytes;
  bytes.append(kMagic, 4);
  bytes.push_back(static_cast<char>(1));  // version
  put_u32(bytes, static_cast<std::uint32_t>(batch.teacher_name.size()));
  bytes += batch.teacher_name;
  put_u16(bytes, static_cast<std::uint16_t>(batch.k));
  put_u16(bytes, static_cast<std::uint16_t>(batch.quant_bits));
  put_u32(bytes, static_cast<std::uint32_t>(batch.num_classes));
  put_u32(bytes, static_cast<std::uint32_t>(batch.subsample_factor));
  put_u64(bytes, batch.size());
  put_u64(bytes, batch.frames_scanned);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    put_u64(bytes, fnv64(batch.utt_ids[batch.ref_utt[i]]));
    put_u32(bytes, batch.ref_frame[i]);
    for (std::size_t j = 0; j < static_cast<std::size_t>(batch.k); ++j) {
      put_u16(bytes, batch.classes_of(i)[j]);
      put_u16(bytes, batch.codes_of(i)[j]);
    }
  }
  atomic_write_file(path, bytes);
}

SoftTargetBatch load_soft_targets(const std::filesystem::path& path, const data::Corpus& corpus) {
  const std::string bytes = read_file(path);
  ByteReader reader(bytes, "soft targets " + path.string());
  if (reader.raw(4) != std::string(kMagic, 4))
    throw DataError("soft targets " + path.string() + ": bad magic");
  if (reader.u8() != 1) throw DataError("soft targets " + path.string() + ": unsupported version");

  SoftTargetBatch batch;
  batch.teacher_name = reader.raw(reader.u32());
  batch.k = reader.u16();
  batch.quant_bits = reader.u16();
  batch.num_classes = static_cast<int>(reader.u32());
  batch.subsample_factor = static_cast<int>(reader.u32());
  const std::uint64_t count = reader.u64();
  batch.frames_scanned = reader.u64();

  std::unordered_map<std::uint64_t, std::string> id_by_hash;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::string& id = corpus.id(i);
    const std::uint64_t h = fnv64(id);
    const auto [it, inserted] = id_by_hash.emplace(h, id);
    if (!inserted && it->second != id)
      throw DataError("soft targets: utterance id hash collision in corpus");
  }
  std::unordered_map<std::string, std::uint32_t> table;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t h = reader.u64();
    const auto it = id_by_hash.find(h);
    if (it == id_by_hash.end())
      throw DataError("soft targets " + path.string() + ": unknown utterance hash");
    const auto [tit, inserted] = table.emplace(it->second, static_cast<std::uint32_t>(batch.utt_ids.size()));
    if (inserted) batch.utt_ids.push_back(it->second);
    batch.ref_utt.push_back(tit->second);
    batch.ref_frame.push_back(reader.u32());
    for (int j = 0; j < batch.k; ++j) {
      batch.entry_classes.push_back(reader.u16());
      batch.entry_codes.push_back(reader.u16());
    }
  }
  if (!reader.done()) throw DataError("soft targets " + path.string() + ": trailing bytes");
  return batch;
}

void dump_soft_targets(const SoftTargetBatch& batch, std::ostream& out, std::size_t max_frames) {
  out << "soft-targets teacher=" << batch.teacher_name << " k=" << batch.k
      << " bits=" << batch.quant_bits << " classes=" << batch.num_classes
      << " frames=" << batch.size() << " scanned=" << batch.frames_scanned
      << " kept_fraction=" << fmt_double(batch.kept_fraction()) << "\n";
  const std::size_t n = std::min(batch.size(), max_frames);
  for (std::size_t i = 0; i < n; ++i) {
    out << batch.utt_ids[batch.ref_utt[i]] << ":" << batch.ref_frame[i];
    const auto cls = batch.classes_of(i);
    const auto codes = batch.codes_of(i);
    for (std::size_t j = 0; j < cls.size(); ++j) {
      out << " " << cls[j] << "=" << codes[j];
    }
    out << "\n";
  }
  if (batch.size() > n) out << "... (" << batch.size() - n << " more)\n";
}

}  // namespace dlab::distill
