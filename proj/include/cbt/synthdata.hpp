#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cbt/encoders.hpp"
#include "cbt/errors.hpp"
#include "cbt/io.hpp"
#include "cbt/rng.hpp"
#include "cbt/tensor.hpp"
#include "cbt/transformer.hpp"

namespace cbt {

// Parameters of the synthetic corpus. A sticky Markov chain over latent
// classes emits Gaussian frames around per-class means and tokens from a
// per-class vocabulary band.
struct CorpusSpec {
  std::size_t num_sequences = 5000;
  std::size_t seq_len = 48;
  std::size_t min_length = 32;     // real lengths are uniform on [min_length, seq_len]
  std::size_t feature_dim = 16;
  std::size_t vocab = 64;
  std::size_t num_classes = 8;
  double p_stay = 0.9;
  double noise_sigma = 1.2;
  double mean_separation = 3.0;    // mean pairwise distance between class means
  std::size_t mean_rank = 3;       // dimension of the subspace the means span
  double recurrence = 0.0;         // P(continuation step returns to the first latent)
  std::int64_t alignment_shift = 0;
  std::uint64_t seed = 1;

  std::size_t band_width() const { return (vocab - kReservedIds) / num_classes; }

  void validate() const {
    if (num_sequences == 0) throw ConfigError("corpus: num_sequences must be positive");
    if (seq_len == 0) throw ConfigError("corpus: seq_len must be positive");
    if (min_length == 0 || min_length > seq_len) throw ConfigError("corpus: min_length must lie in [1, seq_len]");
    if (feature_dim == 0) throw ConfigError("corpus: feature_dim must be positive");
    if (num_classes < 2) throw ConfigError("corpus: num_classes must be at least 2");
    if (vocab < kReservedIds || num_classes > vocab - kReservedIds) {
      throw ConfigError("corpus: num_classes must not exceed vocab - 2 reserved ids");
    }
    if (!(p_stay > 0.0 && p_stay <= 1.0)) throw ConfigError("corpus: p_stay must lie in (0, 1]");
    if (!(noise_sigma > 0.0)) throw ConfigError("corpus: noise_sigma must be positive");
    if (!(mean_separation > 0.0)) throw ConfigError("corpus: mean_separation must be positive");
    if (mean_rank == 0 || mean_rank > feature_dim) throw ConfigError("corpus: mean_rank must lie in [1, feature_dim]");
    if (!(recurrence >= 0.0 && recurrence <= 1.0)) throw ConfigError("corpus: recurrence must lie in [0, 1]");
  }
};

inline void to_json(json& j, const CorpusSpec& s) {
  j = json{{"num_sequences", s.num_sequences}, {"seq_len", s.seq_len},
           {"min_length", s.min_length},       {"feature_dim", s.feature_dim},
           {"vocab", s.vocab},                 {"num_classes", s.num_classes},
           {"p_stay", s.p_stay},               {"noise_sigma", s.noise_sigma},
           {"mean_separation", s.mean_separation}, {"mean_rank", s.mean_rank},
           {"recurrence", s.recurrence},       {"alignment_shift", s.alignment_shift},
           {"seed", s.seed}};
}

inline CorpusSpec corpus_spec_from_json(const json& j, const std::string& where = "corpus") {
  CorpusSpec s;
  StrictObject o(j, where);
  o.get("num_sequences", s.num_sequences);
  o.get("seq_len", s.seq_len);
  o.get("min_length", s.min_length);
  o.get("feature_dim", s.feature_dim);
  o.get("vocab", s.vocab);
  o.get("num_classes", s.num_classes);
  o.get("p_stay", s.p_stay);
  o.get("noise_sigma", s.noise_sigma);
  o.get("mean_separation", s.mean_separation);
  o.get("mean_rank", s.mean_rank);
  o.get("recurrence", s.recurrence);
  o.get("alignment_shift", s.alignment_shift);
  o.get("seed", s.seed);
  o.finish();
  return s;
}

struct LabeledSequence {
  FeatureSequence x;
  TokenSequence y;
  std::vector<std::int64_t> latents;  // length T; -1 at padded positions
  std::int64_t seq_label = 0;         // majority latent (ties: smallest id)
  std::int64_t next_label = 0;        // latent at the continuation step

  bool operator==(const LabeledSequence& o) const {
    return x.values == o.x.values && x.pad_mask == o.x.pad_mask && y.ids == o.y.ids &&
           y.pad_mask == o.y.pad_mask && latents == o.latents && seq_label == o.seq_label &&
           next_label == o.next_label;
  }
};

struct Corpus {
  CorpusSpec spec;
  std::vector<LabeledSequence> sequences;
};

// Per-class frame means (C x D_in), a deterministic function of the corpus spec.
// The means span a `mean_rank`-dimensional subspace and are scaled so their
// mean pairwise distance equals `mean_separation`.
inline Tensor<double> class_means(const CorpusSpec& spec) {
  spec.validate();
  Rng rng = Rng::derive(spec.seed, 0x6d65616e73ULL);
  const std::size_t c = spec.num_classes, d = spec.feature_dim, r = spec.mean_rank;
  // Orthonormal basis of a random r-dimensional subspace (Gram-Schmidt).
  std::vector<std::vector<double>> basis;
  while (basis.size() < r) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += v[k] * b[k];
      for (std::size_t k = 0; k < d; ++k) v[k] -= dot * b[k];
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-8) continue;
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  Tensor<double> means(Shape{c, d});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t j = 0; j < r; ++j) {
      const double coef = rng.normal();
      for (std::size_t q = 0; q < d; ++q) means(k, q) += coef * basis[j][q];
    }
  }
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = a + 1; b < c; ++b) {
      double s = 0;
      for (std::size_t q = 0; q < d; ++q) s += (means(a, q) - means(b, q)) * (means(a, q) - means(b, q));
      total += std::sqrt(s);
      ++pairs;
    }
  const double factor = spec.mean_separation / (total / double(pairs));
  for (auto& v : means.data()) v = static_cast<double>(static_cast<float>(v * factor));
  return means;
}

namespace detail {

inline std::int64_t sticky_step(std::int64_t prev, const CorpusSpec& spec, Rng& rng) {
  if (rng.uniform() < spec.p_stay) return prev;
  // Switch to a different class, uniformly.
  auto next = static_cast<std::int64_t>(rng.below(spec.num_classes - 1));
  return next >= prev ? next + 1 : next;
}

inline std::int64_t majority(const std::vector<std::int64_t>& latents, std::size_t classes) {
  std::vector<std::size_t> count(classes, 0);
  for (auto z : latents)
    if (z >= 0) ++count[static_cast<std::size_t>(z)];
  return static_cast<std::int64_t>(std::max_element(count.begin(), count.end()) - count.begin());
}

}  // namespace detail

// Sequence `index` of the corpus; independent of every other index.
inline LabeledSequence generate_one(const CorpusSpec& spec, const Tensor<double>& means,
                                    std::size_t index) {
  Rng rng = Rng::derive(spec.seed, 1, index);
  const std::size_t len = spec.seq_len, d = spec.feature_dim;
  const std::size_t real = spec.min_length + rng.below(spec.seq_len - spec.min_length + 1);

  LabeledSequence s;
  s.latents.assign(len, -1);
  s.latents[0] = static_cast<std::int64_t>(rng.below(spec.num_classes));
  for (std::size_t t = 1; t < real; ++t) s.latents[t] = detail::sticky_step(s.latents[t - 1], spec, rng);
  const bool recur = rng.uniform() < spec.recurrence;
  const std::int64_t cont = detail::sticky_step(s.latents[real - 1], spec, rng);
  s.next_label = recur ? s.latents[0] : cont;
  s.seq_label = detail::majority(s.latents, spec.num_classes);

  Tensor<double> values(Shape{len, d});
  for (std::size_t t = 0; t < real; ++t) {
    const auto z = static_cast<std::size_t>(s.latents[t]);
    for (std::size_t q = 0; q < d; ++q) {
      const double v = means(z, q) + spec.noise_sigma * rng.normal();
      values(t, q) = static_cast<double>(static_cast<float>(v));
    }
  }
  s.x = FeatureSequence::padded(std::move(values), real);

  const std::size_t band = spec.band_width();
  s.y.ids.assign(len, kPadId);
  s.y.pad_mask.assign(len, 0);
  const auto n = static_cast<std::int64_t>(real);
  for (std::size_t t = 0; t < real; ++t) {
    std::int64_t src = (static_cast<std::int64_t>(t) - spec.alignment_shift) % n;
    if (src < 0) src += n;
    const auto z = s.latents[static_cast<std::size_t>(src)];
    s.y.ids[t] = kReservedIds + z * static_cast<std::int64_t>(band) +
                 static_cast<std::int64_t>(rng.below(band));
    s.y.pad_mask[t] = 1;
  }
  return s;
}

inline Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus{spec, {}};
  const auto means = class_means(spec);
  corpus.sequences.reserve(spec.num_sequences);
  for (std::size_t i = 0; i < spec.num_sequences; ++i) corpus.sequences.push_back(generate_one(spec, means, i));
  return corpus;
}

// k distinct positions among the first `real_length` of a sequence of
// `sequence_length` (defaults to real_length).
inline MaskPattern sample_masks(std::size_t real_length, std::size_t k, Rng& rng,
                                std::size_t sequence_length = 0) {
  if (sequence_length == 0) sequence_length = real_length;
  if (k < 1) throw ConfigError("sample_masks: need at least one masked position");
  if (k > real_length) {
    throw ConfigError(detail::concat("sample_masks: cannot mask ", k, " of ", real_length, " positions"));
  }
  if (real_length > sequence_length) throw ConfigError("sample_masks: real length exceeds sequence length");
  return MaskPattern{rng.choose(real_length, k), sequence_length};
}

// Posterior-argmax class of each real frame from that frame alone, given
// the generating means and noise level (uniform prior).
inline std::vector<std::int64_t> frame_bayes_predictions(const LabeledSequence& s,
                                                         const Tensor<double>& means) {
  std::vector<std::int64_t> out;
  for (std::size_t t = 0; t < s.x.length(); ++t) {
    if (!s.x.pad_mask[t]) break;
    double best = std::numeric_limits<double>::infinity();
    std::int64_t arg = 0;
    for (std::size_t c = 0; c < means.rows(); ++c) {
      double dist = 0;
      for (std::size_t q = 0; q < means.cols(); ++q) {
        const double diff = s.x.values(t, q) - means(c, q);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = static_cast<std::int64_t>(c);
      }
    }
    out.push_back(arg);
  }
  return out;
}

inline double frame_bayes_accuracy(std::span<const LabeledSequence> seqs, const Tensor<double>& means) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : seqs) {
    const auto pred = frame_bayes_predictions(s, means);
    for (std::size_t t = 0; t < pred.size(); ++t) {
      hit += pred[t] == s.latents[t];
      ++total;
    }
  }
  return total ? double(hit) / double(total) : 0.0;
}

// ---- corpus file -------------------------------------------------------------
// Line 1: canonical JSON of the corpus spec. Then one JSON record per sequence; x
// is the full T x D_in block as base64 of little-endian float32.

inline std::string encode_corpus(const Corpus& corpus) {
  std::string out = canonical(json(corpus.spec));
  out.push_back('\n');
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    const auto& s = corpus.sequences[i];
    std::string raw;
    raw.reserve(s.x.values.size() * 4);
    for (double v : s.x.values.data()) io::put_f32(raw, static_cast<float>(v));
    json rec{{"index", i},
             {"length", s.x.real_length()},
             {"x", io::base64_encode(raw)},
             {"y", s.y.ids},
             {"latents", s.latents},
             {"seq_label", s.seq_label},
             {"next_label", s.next_label}};
    out += canonical(rec);
    out.push_back('\n');
  }
  return out;
}

inline Corpus decode_corpus(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("corpus file is empty");
  Corpus corpus;
  try {
    corpus.spec = corpus_spec_from_json(io::parse_json(line, "corpus header"), "corpus header");
    corpus.spec.validate();
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  const auto& spec = corpus.spec;
  const std::size_t len = spec.seq_len, d = spec.feature_dim;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      LabeledSequence s;
      const std::size_t real = rec.at("length").get<std::size_t>();
      const std::string raw = io::base64_decode(rec.at("x").get<std::string>());
      if (raw.size() != len * d * 4 || real == 0 || real > len) {
        throw DataError("frame block has the wrong size");
      }
      Tensor<double> values(Shape{len, d});
      const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
      for (std::size_t k = 0; k < len * d; ++k) {
        values[k] = static_cast<double>(std::bit_cast<float>(io::get_le<std::uint32_t>(bytes + 4 * k)));
      }
      s.x.values = std::move(values);
      s.x.pad_mask.assign(len, 0);
      for (std::size_t t = 0; t < real; ++t) s.x.pad_mask[t] = 1;
      s.y.ids = rec.at("y").get<std::vector<std::int64_t>>();
      s.y.pad_mask = s.x.pad_mask;
      s.latents = rec.at("latents").get<std::vector<std::int64_t>>();
      s.seq_label = rec.at("seq_label").get<std::int64_t>();
      s.next_label = rec.at("next_label").get<std::int64_t>();
      if (s.y.ids.size() != len || s.latents.size() != len) throw DataError("stream length differs from seq_len");
      s.x.validate();
      s.y.validate(spec.vocab);
      corpus.sequences.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError(detail::concat("corpus line ", lineno, ": ", e.what()));
    } catch (const DataError& e) {
      throw DataError(detail::concat("corpus line ", lineno, ": ", e.what()));
    }
  }
  return corpus;
}

inline void write_corpus(const std::string& path, const Corpus& corpus) {
  io::write_file(path, encode_corpus(corpus));
}

inline Corpus read_corpus(const std::string& path) { return decode_corpus(io::read_file(path)); }

// Half-open index range [begin, end) of a corpus.
struct Split {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Leading sequences for training, the trailing `test_fraction` for testing.
inline std::pair<Split, Split> train_test_split(std::size_t n, double test_fraction) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0, 1)");
  const auto test = static_cast<std::size_t>(std::llround(double(n) * test_fraction));
  if (test == 0 || test >= n) throw DataError("corpus too small for a train/test split");
  return {Split{0, n - test}, Split{n - test, n}};
}

}  // namespace cbt
