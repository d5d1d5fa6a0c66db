#pragma once

#include "cbt/model.hpp"
#include "cbt/synthdata.hpp"
#include "cbt/trainer.hpp"

namespace cbt::testing {

// A model small enough for many-step unit tests.
inline ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder = EncoderConfig{16, 16, 16};
  m.visual = TransformerConfig{2, 2, 16, 32, 64, 0.0, 1e-5};
  m.text = TransformerConfig{1, 2, 16, 32, 64, 0.0, 1e-5};
  m.cross.hidden = 16;
  m.cross.heads = 2;
  m.cross.ff_width = 32;
  m.cross.head_hidden = 16;
  return m;
}

inline Corpus tiny_corpus(std::size_t n = 60, std::uint64_t seed = 1) {
  CorpusSpec spec;
  spec.num_sequences = n;
  spec.seq_len = 16;
  spec.min_length = 10;
  spec.seed = seed;
  return generate(spec);
}

inline TrainConfig tiny_train(std::size_t steps = 10) {
  TrainConfig t;
  t.batch_size = 4;
  t.steps = steps;
  t.mask_count = 3;
  return t;
}

}  // namespace cbt::testing
