#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cbt/encoders.hpp"
#include "cbt/errors.hpp"
#include "cbt/graph.hpp"
#include "cbt/transformer.hpp"

namespace cbt {

struct LossWeights {
  double bert = 0.0;
  double visual = 1.0;
  double cross = 0.0;

  void validate() const {
    if (bert < 0.0 || visual < 0.0 || cross < 0.0) {
      throw ConfigError("loss weights must be non-negative");
    }
    if (bert == 0.0 && visual == 0.0 && cross == 0.0) {
      throw ConfigError("at least one loss weight must be positive");
    }
  }
};

struct NceOptions {
  double temperature = 1.0;  // logits are divided by this
  bool normalize = false;    // L2-normalise both sides before the dot product
};

// One anchor of the contrastive loss: prediction row, the pool index of its
// true frame, and the pool indices of its negatives.
struct NceAnchor {
  std::size_t prediction_row = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
};

// Index structure of a contrastive batch: anchors refer into a pool of
// candidate embeddings.
struct NceIndex {
  std::size_t pool_size = 0;
  std::vector<NceAnchor> anchors;

  void validate() const {
    if (anchors.empty()) throw DataError("contrastive batch has no anchors");
    for (const auto& a : anchors) {
      if (a.positive >= pool_size) throw DataError("anchor positive outside the pool");
      for (std::size_t j : a.negatives) {
        if (j >= pool_size) throw DataError("negative index outside the pool");
        if (j == a.positive) throw DataError("an anchor's own frame cannot be its negative");
      }
    }
  }
};

template <std::floating_point T>
struct NceBatchView {
  Var<T> predictions;  // one row per anchor (the contextual predictions)
  Var<T> pool;         // frame embeddings referenced by the index
  NceIndex index;
};

// Per-sequence masking layout for building a batch view.
struct SequenceSlots {
  PadMask pad_mask;
  MaskPattern mask;
};

// Anchors are all masked positions of the batch, in sequence order. The pool
// is every real frame of the batch; each anchor's negatives are every pool
// entry other than its own frame.
inline NceIndex build_nce_index(std::span<const SequenceSlots> batch) {
  if (batch.empty()) throw DataError("build_batch_view: empty batch");
  NceIndex index;
  std::vector<std::vector<std::size_t>> pool_of(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    batch[b].mask.validate(batch[b].pad_mask);
    pool_of[b].assign(batch[b].pad_mask.size(), 0);
    for (std::size_t t = 0; t < batch[b].pad_mask.size(); ++t) {
      if (batch[b].pad_mask[t]) pool_of[b][t] = index.pool_size++;
    }
  }
  std::size_t row = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t t : batch[b].mask.masked) {
      NceAnchor a;
      a.prediction_row = row++;
      a.positive = pool_of[b][t];
      a.negatives.reserve(index.pool_size - 1);
      for (std::size_t j = 0; j < index.pool_size; ++j)
        if (j != a.positive) a.negatives.push_back(j);
      index.anchors.push_back(std::move(a));
    }
  }
  if (index.anchors.empty()) throw DataError("build_batch_view: batch has no masked positions");
  return index;
}

// One encoded sequence: frame embeddings e (before masking), contextual
// outputs h, and the layout used to produce h.
template <std::floating_point T>
struct EncodedSequence {
  Var<T> embeddings;
  Var<T> context;
  SequenceSlots slots;
};

template <std::floating_point T>
NceBatchView<T> build_batch_view(std::span<const EncodedSequence<T>> encoded) {
  std::vector<SequenceSlots> slots;
  slots.reserve(encoded.size());
  for (const auto& s : encoded) slots.push_back(s.slots);
  NceIndex index = build_nce_index(slots);
  std::vector<Var<T>> pool_parts, pred_parts;
  for (const auto& s : encoded) {
    std::vector<std::size_t> real;
    for (std::size_t t = 0; t < s.slots.pad_mask.size(); ++t)
      if (s.slots.pad_mask[t]) real.push_back(t);
    if (!real.empty()) pool_parts.push_back(gather_rows(s.embeddings, std::move(real)));
    if (!s.slots.mask.empty()) pred_parts.push_back(gather_rows(s.context, s.slots.mask.masked));
  }
  return NceBatchView<T>{concat_rows(std::span<const Var<T>>(pred_parts)),
                         concat_rows(std::span<const Var<T>>(pool_parts)), std::move(index)};
}

// Mean over anchors of -log[exp(e_t.p) / (exp(e_t.p) + sum_j exp(e_j.p))],
// evaluated as log-sum-exp over {positive} U negatives minus the positive
// logit.
template <std::floating_point T>
Var<T> visual_nce(const NceBatchView<T>& view, const NceOptions& opts = {}) {
  view.index.validate();
  if (view.pool.rows() != view.index.pool_size) {
    throw ShapeError(detail::concat("visual_nce: pool has ", view.pool.rows(), " rows, index expects ",
                                    view.index.pool_size));
  }
  if (view.predictions.rows() < view.index.anchors.size()) {
    throw ShapeError("visual_nce: fewer prediction rows than anchors");
  }
  if (opts.temperature <= 0.0) throw ConfigError("NCE temperature must be positive");
  Var<T> pred = view.predictions, pool = view.pool;
  if (opts.normalize) {
    pred = row_l2_normalize(pred);
    pool = row_l2_normalize(pool);
  }
  std::vector<std::size_t> rows;
  for (const auto& a : view.index.anchors) rows.push_back(a.prediction_row);
  auto anchors = gather_rows(pred, rows);
  auto logits = matmul_nt(anchors, pool);
  if (opts.temperature != 1.0) logits = scale(logits, T(1.0 / opts.temperature));
  const std::size_t m = view.index.anchors.size(), n = view.index.pool_size;
  std::vector<std::uint8_t> cand(m * n, 0);
  std::vector<std::size_t> positives(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& a = view.index.anchors[i];
    positives[i] = a.positive;
    cand[i * n + a.positive] = 1;
    for (std::size_t j : a.negatives) cand[i * n + j] = 1;
  }
  auto lse = masked_row_logsumexp(logits, std::move(cand));
  auto pos = pick(logits, std::move(positives));
  return mean(sub(lse, pos));
}

// One token sequence for the masked-token objective.
template <std::floating_point T>
struct TokenPrediction {
  Var<T> context;  // T' x D outputs of the text encoder on the masked input
  const TokenSequence* targets;
  const MaskPattern* mask;
};

// Mean over masked positions of -log softmax(h_t . table^T)[y_t], the
// softmax running over every non-reserved row of the table.
template <std::floating_point T>
Var<T> bert_pseudo_nll(std::span<const TokenPrediction<T>> batch, Var<T> table) {
  const std::size_t vocab = table.rows();
  if (vocab <= static_cast<std::size_t>(kReservedIds)) {
    throw ConfigError("vocabulary has no candidates beyond the reserved ids");
  }
  std::vector<Var<T>> parts;
  std::vector<std::size_t> targets;
  for (const auto& p : batch) {
    p.mask->validate(p.targets->pad_mask);
    if (p.mask->empty()) continue;
    for (std::size_t t : p.mask->masked) {
      const std::int64_t id = p.targets->ids[t];
      if (id < kReservedIds || static_cast<std::size_t>(id) >= vocab) {
        throw DataError(detail::concat("masked position ", t, " has reserved or invalid target id ", id));
      }
      targets.push_back(static_cast<std::size_t>(id - kReservedIds));
    }
    parts.push_back(gather_rows(p.context, p.mask->masked));
  }
  if (parts.empty()) throw DataError("bert_pseudo_nll: no masked positions");
  auto h = concat_rows(std::span<const Var<T>>(parts));
  std::vector<std::size_t> cand_rows;
  for (std::size_t k = static_cast<std::size_t>(kReservedIds); k < vocab; ++k) cand_rows.push_back(k);
  auto logits = matmul_nt(h, gather_rows(table, std::move(cand_rows)));
  std::vector<std::uint8_t> all(logits.rows() * logits.cols(), 1);
  auto lse = masked_row_logsumexp(logits, std::move(all));
  return mean(sub(lse, pick(logits, std::move(targets))));
}

template <std::floating_point T>
Var<T> bert_pseudo_nll(Var<T> h, const TokenSequence& targets, const MaskPattern& m, Var<T> table) {
  std::array<TokenPrediction<T>, 1> one{TokenPrediction<T>{h, &targets, &m}};
  return bert_pseudo_nll(std::span<const TokenPrediction<T>>(one), table);
}

// w_bert * l_bert + w_visual * l_visual + w_cross * l_cross.
template <std::floating_point T>
Var<T> combined_loss(Var<T> l_bert, Var<T> l_visual, Var<T> l_cross, const LossWeights& w) {
  w.validate();
  const std::array<Var<T>, 3> terms{l_bert, l_visual, l_cross};
  const std::array<T, 3> weights{T(w.bert), T(w.visual), T(w.cross)};
  for (const auto& term : terms) {
    if (!std::isfinite(term.value().item())) {
      throw NumericError("combined", "combined_loss: non-finite component");
    }
  }
  return weighted_sum(std::span<const Var<T>>(terms), std::span<const T>(weights));
}

}  // namespace cbt
