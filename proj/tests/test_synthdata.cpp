#include <gtest/gtest.h>

#include <cmath>

#include "cbt/synthdata.hpp"

using namespace cbt;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.num_sequences = 200;
  return s;
}

}  // namespace

TEST(Generate, DegenerateChainEmitsTheFirstClassMean) {
  auto spec = small_spec();
  spec.noise_sigma = 1e-12;
  spec.p_stay = 1.0;
  spec.num_sequences = 20;
  const auto corpus = generate(spec);
  const auto means = class_means(spec);
  for (const auto& s : corpus.sequences) {
    const auto z0 = s.latents[0];
    for (std::size_t t = 0; t < s.x.real_length(); ++t) {
      EXPECT_EQ(s.latents[t], z0);
      for (std::size_t q = 0; q < spec.feature_dim; ++q)
        EXPECT_EQ(s.x.values(t, q), means(static_cast<std::size_t>(z0), q));
    }
    EXPECT_EQ(s.seq_label, z0);
  }
}

TEST(Generate, SameSeedGivesIdenticalCorpora) {
  const auto a = generate(small_spec());
  const auto b = generate(small_spec());
  ASSERT_EQ(a.sequences.size(), b.sequences.size());
  for (std::size_t i = 0; i < a.sequences.size(); ++i) EXPECT_TRUE(a.sequences[i] == b.sequences[i]) << i;
  auto other = small_spec();
  other.seed = 2;
  EXPECT_FALSE(generate(other).sequences[0] == a.sequences[0]);
}

TEST(Generate, SequencesDoNotDependOnCorpusSize) {
  auto big = small_spec();
  big.num_sequences = 50;
  auto tiny = small_spec();
  tiny.num_sequences = 5;
  const auto a = generate(big), b = generate(tiny);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(a.sequences[i] == b.sequences[i]);
}

TEST(Generate, EmpiricalStayRateMatchesPersistence) {
  auto spec = small_spec();
  spec.num_sequences = 2500;
  const auto corpus = generate(spec);
  std::size_t stay = 0, total = 0;
  for (const auto& s : corpus.sequences) {
    for (std::size_t t = 1; t < s.x.real_length(); ++t) {
      stay += s.latents[t] == s.latents[t - 1];
      ++total;
    }
  }
  ASSERT_GE(total, 90000u);
  EXPECT_NEAR(double(stay) / double(total), spec.p_stay, 0.01);
}

TEST(Generate, StreamsRespectShapesAndPadding) {
  const auto spec = small_spec();
  const auto corpus = generate(spec);
  for (const auto& s : corpus.sequences) {
    EXPECT_EQ(s.x.length(), spec.seq_len);
    EXPECT_EQ(s.x.dim(), spec.feature_dim);
    EXPECT_GE(s.x.real_length(), spec.min_length);
    EXPECT_NO_THROW(s.x.validate());
    EXPECT_NO_THROW(s.y.validate(spec.vocab));
    EXPECT_EQ(s.y.pad_mask, s.x.pad_mask);
    for (std::size_t t = s.x.real_length(); t < spec.seq_len; ++t) EXPECT_EQ(s.latents[t], -1);
  }
}

TEST(Generate, SeqLabelIsTheMajorityLatent) {
  const auto corpus = generate(small_spec());
  for (const auto& s : corpus.sequences) {
    std::vector<int> count(8, 0);
    for (auto z : s.latents)
      if (z >= 0) ++count[static_cast<std::size_t>(z)];
    const int best = *std::max_element(count.begin(), count.end());
    EXPECT_EQ(count[static_cast<std::size_t>(s.seq_label)], best);
    for (std::int64_t k = 0; k < s.seq_label; ++k) EXPECT_LT(count[static_cast<std::size_t>(k)], best);
  }
}

TEST(Generate, AlignedTokensFollowTheLatentBand) {
  const auto spec = small_spec();
  const auto corpus = generate(spec);
  const auto band = static_cast<std::int64_t>(spec.band_width());
  for (const auto& s : corpus.sequences)
    for (std::size_t t = 0; t < s.x.real_length(); ++t) EXPECT_EQ((s.y.ids[t] - kReservedIds) / band, s.latents[t]);
}

TEST(Generate, ShiftedTokensFollowTheShiftedLatent) {
  auto spec = small_spec();
  spec.alignment_shift = 2;
  const auto corpus = generate(spec);
  const auto band = static_cast<std::int64_t>(spec.band_width());
  for (const auto& s : corpus.sequences) {
    const std::size_t n = s.x.real_length();
    for (std::size_t t = 0; t < n; ++t)
      EXPECT_EQ((s.y.ids[t] - kReservedIds) / band, s.latents[(t + n - 2) % n]);
  }
}

TEST(Generate, FullRecurrenceReturnsToTheFirstLatent) {
  auto spec = small_spec();
  spec.recurrence = 1.0;
  for (const auto& s : generate(spec).sequences) EXPECT_EQ(s.next_label, s.latents[0]);
}

TEST(Generate, NextLabelIsAStickyContinuation) {
  auto spec = small_spec();
  spec.num_sequences = 3000;
  std::size_t same = 0;
  const auto corpus = generate(spec);
  for (const auto& s : corpus.sequences) same += s.next_label == s.latents[s.x.real_length() - 1];
  EXPECT_NEAR(double(same) / 3000.0, spec.p_stay, 0.02);
}

TEST(CorpusSpec, InvalidFieldsAreRejected) {
  auto bad = [](auto edit) {
    CorpusSpec s;
    edit(s);
    return s;
  };
  EXPECT_THROW(generate(bad([](CorpusSpec& s) { s.num_classes = 1; })), ConfigError);
  EXPECT_THROW(generate(bad([](CorpusSpec& s) { s.num_classes = 63; })), ConfigError);
  EXPECT_THROW(generate(bad([](CorpusSpec& s) { s.p_stay = 0.0; })), ConfigError);
  EXPECT_THROW(generate(bad([](CorpusSpec& s) { s.noise_sigma = 0.0; })), ConfigError);
  EXPECT_THROW(generate(bad([](CorpusSpec& s) { s.min_length = 49; })), ConfigError);
  EXPECT_THROW(corpus_spec_from_json(json{{"num_clases", 8}}), ConfigError);
}

TEST(ClassMeans, SpanLowRankSubspaceAtRequestedSeparation) {
  const CorpusSpec spec;
  const auto m = class_means(spec);
  double total = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < 8; ++a)
    for (std::size_t b = a + 1; b < 8; ++b) {
      double s = 0;
      for (std::size_t q = 0; q < 16; ++q) s += (m(a, q) - m(b, q)) * (m(a, q) - m(b, q));
      total += std::sqrt(s);
      ++pairs;
    }
  EXPECT_NEAR(total / pairs, spec.mean_separation, 1e-5);
  // Rank check: Gram matrix of (mean - mean_0) differences has rank <= mean_rank.
  std::vector<std::vector<double>> rows;
  for (std::size_t a = 0; a < 8; ++a) rows.emplace_back(m.row(a).begin(), m.row(a).end());
  std::size_t rank = 0;
  for (std::size_t col = 0; col < 16 && rank < rows.size(); ++col) {
    std::size_t piv = rank;
    for (std::size_t r = rank; r < rows.size(); ++r)
      if (std::abs(rows[r][col]) > std::abs(rows[piv][col])) piv = r;
    if (std::abs(rows[piv][col]) < 1e-5) continue;
    std::swap(rows[piv], rows[rank]);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (r == rank) continue;
      const double f = rows[r][col] / rows[rank][col];
      for (std::size_t c = 0; c < 16; ++c) rows[r][c] -= f * rows[rank][c];
    }
    ++rank;
  }
  EXPECT_EQ(rank, spec.mean_rank);
}

TEST(BayesOracle, SingleFramesAreAmbiguous) {
  CorpusSpec spec;
  spec.num_sequences = 1000;
  const auto corpus = generate(spec);
  const auto means = class_means(spec);
  const double frame = frame_bayes_accuracy(std::span<const LabeledSequence>(corpus.sequences), means);
  EXPECT_LT(frame, 0.85);
  EXPECT_GT(frame, 1.0 / 8.0);
  // Sequence labels stay recoverable from per-frame decisions well above chance.
  std::size_t hit = 0;
  for (const auto& s : corpus.sequences) {
    const auto pred = frame_bayes_predictions(s, means);
    std::vector<std::int64_t> padded(pred.begin(), pred.end());
    hit += detail::majority(padded, spec.num_classes) == s.seq_label;
  }
  EXPECT_GT(double(hit) / 1000.0, 0.4);
}

TEST(BayesOracle, PredictionsAreNearestMean) {
  auto spec = small_spec();
  spec.noise_sigma = 1e-12;
  const auto corpus = generate(spec);
  const auto means = class_means(spec);
  EXPECT_EQ(frame_bayes_accuracy(std::span<const LabeledSequence>(corpus.sequences), means), 1.0);
}

TEST(SampleMasks, DrawsDistinctRealPositions) {
  Rng rng(1);
  for (auto [n, k] : {std::pair<std::size_t, std::size_t>{40, 6}, {48, 6}}) {
    const auto m = sample_masks(n, k, rng);
    ASSERT_EQ(m.masked.size(), k);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_LT(m.masked[i], n);
      if (i) {
        EXPECT_LT(m.masked[i - 1], m.masked[i]);
      }
    }
  }
  EXPECT_EQ(sample_masks(1, 1, rng).masked, std::vector<std::size_t>{0});
  EXPECT_THROW(sample_masks(3, 4, rng), ConfigError);
  EXPECT_THROW(sample_masks(3, 0, rng), ConfigError);
  const auto padded = sample_masks(5, 5, rng, 8);
  EXPECT_EQ(padded.sequence_length, 8u);
  EXPECT_EQ(padded.masked.back(), 4u);
}

TEST(SampleMasks, IsUniformOverPositions) {
  Rng rng(2);
  std::vector<int> hits(10, 0);
  for (int r = 0; r < 20000; ++r)
    for (auto t : sample_masks(10, 3, rng).masked) ++hits[t];
  for (int h : hits) EXPECT_NEAR(h / 20000.0, 0.3, 0.015);
}

TEST(CorpusFile, RoundTripIsBitExact) {
  auto spec = small_spec();
  spec.num_sequences = 30;
  spec.alignment_shift = -3;
  const auto corpus = generate(spec);
  const std::string text = encode_corpus(corpus);
  const auto back = decode_corpus(text);
  ASSERT_EQ(back.sequences.size(), corpus.sequences.size());
  for (std::size_t i = 0; i < back.sequences.size(); ++i) EXPECT_TRUE(back.sequences[i] == corpus.sequences[i]);
  EXPECT_EQ(encode_corpus(back), text);
  EXPECT_EQ(text.substr(0, text.find('\n')), canonical(json(spec)));
}

TEST(CorpusFile, CorruptRecordsAreDataErrors) {
  auto spec = small_spec();
  spec.num_sequences = 3;
  const std::string text = encode_corpus(generate(spec));
  EXPECT_THROW(decode_corpus(""), DataError);
  EXPECT_THROW(decode_corpus(text.substr(0, text.size() - 40)), DataError);
  EXPECT_THROW(decode_corpus("{\"num_classes\":1}\n"), DataError);
}

TEST(TrainTestSplit, TrailingFractionIsHeldOut) {
  const auto [train, test] = train_test_split(5000, 0.4);
  EXPECT_EQ(train.begin, 0u);
  EXPECT_EQ(train.end, 3000u);
  EXPECT_EQ(test.begin, 3000u);
  EXPECT_EQ(test.size(), 2000u);
  EXPECT_THROW(train_test_split(1, 0.4), DataError);
  EXPECT_THROW(train_test_split(10, 1.0), ConfigError);
}
