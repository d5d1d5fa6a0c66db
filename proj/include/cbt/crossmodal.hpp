#pragma once

#include <string>
#include <vector>

#include "cbt/encoders.hpp"
#include "cbt/errors.hpp"
#include "cbt/graph.hpp"
#include "cbt/params.hpp"
#include "cbt/transformer.hpp"

namespace cbt {

enum class Aggregate { slot0, avgpool };

struct CrossModalConfig {
  std::size_t layers = 1;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t ff_width = 256;
  std::size_t max_positions = 128;
  std::size_t head_hidden = 64;
  Aggregate aggregate = Aggregate::slot0;
  double ln_eps = 1e-5;

  TransformerConfig layer_config() const {
    TransformerConfig t;
    t.layers = layers;
    t.heads = heads;
    t.hidden = hidden;
    t.ff_width = ff_width;
    t.max_positions = max_positions;
    t.ln_eps = ln_eps;
    return t;
  }

  void validate() const {
    if (layers < 1) throw ConfigError("cross-modal transformer needs at least one layer");
    if (head_hidden == 0) throw ConfigError("cross-modal head width must be positive");
    layer_config().validate();
  }
};

// A visual sequence with its paired token sequence.
struct PairedExample {
  FeatureSequence x;
  TokenSequence y;
  bool aligned = true;
};

inline void init_crossmodal(ParamStore<double>& store, const CrossModalConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden;
  store.add("cross.agg", group::cross, detail::trunc_normal_vec(rng, d));
  store.add("cross.type_x", group::cross, detail::trunc_normal_vec(rng, d));
  store.add("cross.type_y", group::cross, detail::trunc_normal_vec(rng, d));
  store.add("cross.pos", group::cross, detail::trunc_normal(rng, cfg.max_positions, d));
  const auto tcfg = cfg.layer_config();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    init_transformer_layer(store, tcfg, "cross.layer" + std::to_string(l), group::cross, rng);
  }
  store.add("cross.head.w1", group::cross, detail::trunc_normal(rng, d, cfg.head_hidden));
  store.add("cross.head.b1", group::cross, Tensor<double>(Shape{cfg.head_hidden}));
  store.add("cross.head.w2", group::cross, detail::trunc_normal(rng, cfg.head_hidden, 1));
  store.add("cross.head.b2", group::cross, Tensor<double>(Shape{1}));
}

namespace detail {

template <std::floating_point T>
Var<T> score_head(Var<T> features, Binding<T>& p) {
  auto h = gelu(linear(features, p, "cross.head.w1", "cross.head.b1"));
  return linear(h, p, "cross.head.w2", "cross.head.b2");
}

template <std::floating_point T>
Var<T> positions(Binding<T>& p, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
  return gather_rows(p("cross.pos"), std::move(rows));
}

}  // namespace detail

// Unbounded correspondence score s(x, y): [agg; hx + type_x; hy + type_y]
// plus continuous positions, through the cross-modal layers, then a
// two-layer MLP on the aggregate slot (or on the mean of real rows).
// Returns a 1 x 1 Var.
template <std::floating_point T>
Var<T> mi_score(Var<T> hx, const PadMask& pad_x, Var<T> hy, const PadMask& pad_y,
                const CrossModalConfig& cfg, Binding<T>& p) {
  const std::size_t d = cfg.hidden;
  if (hx.cols() != d || hy.cols() != d) throw ShapeError("mi_score: stream width differs from hidden");
  if (pad_x.size() != hx.rows() || pad_y.size() != hy.rows()) throw ShapeError("mi_score: pad mask length");
  const std::size_t len = 1 + hx.rows() + hy.rows();
  if (len > cfg.max_positions) {
    throw ShapeError(detail::concat("mi_score: combined length ", len, " exceeds max_positions ",
                                    cfg.max_positions));
  }
  auto agg = reshape(p("cross.agg"), Shape{1, d});
  auto sx = add_row(hx, p("cross.type_x"));
  auto sy = add_row(hy, p("cross.type_y"));
  auto rows = add(concat_rows({agg, sx, sy}), detail::positions(p, 0, len));
  PadMask pad{1};
  pad.insert(pad.end(), pad_x.begin(), pad_x.end());
  pad.insert(pad.end(), pad_y.begin(), pad_y.end());

  const auto tcfg = cfg.layer_config();
  const ForwardContext ctx{};
  const std::vector<std::size_t> slot0{0};
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const bool last = l + 1 == cfg.layers;
    const auto* query = (last && cfg.aggregate == Aggregate::slot0) ? &slot0 : nullptr;
    rows = transformer_layer(rows, pad, tcfg, "cross.layer" + std::to_string(l), p, ctx, query);
  }
  Var<T> features = rows;
  if (cfg.aggregate == Aggregate::avgpool) {
    std::vector<std::size_t> real;
    for (std::size_t i = 0; i < pad.size(); ++i)
      if (pad[i]) real.push_back(i);
    const std::size_t n = real.size();
    auto picked = gather_rows(rows, std::move(real));
    features = matmul(p.graph().constant(Tensor<T>(Shape{1, n}, T(1) / T(n))), picked);
  }
  return detail::score_head(features, p);
}

// A contextual stream ready for scoring.
template <std::floating_point T>
struct Stream {
  Var<T> h;
  PadMask pad;
};

// Score matrix S(i, j) = s(x_i, y_j) over every pair of the two lists. Uses a
// shared-projection evaluation when the cross-modal transformer has one
// layer read out at slot 0 (only the slot-0 query is needed then);
// otherwise scores each pair with mi_score.
template <std::floating_point T>
Var<T> score_slate(std::span<const Stream<T>> xs, std::span<const Stream<T>> ys,
                   const CrossModalConfig& cfg, Binding<T>& p) {
  if (xs.empty() || ys.empty()) throw ShapeError("score_slate: empty slate");
  bool uniform = true;
  for (const auto& x : xs) uniform = uniform && x.h.rows() == xs[0].h.rows();
  const bool fast = cfg.layers == 1 && cfg.aggregate == Aggregate::slot0 && uniform;
  std::vector<Var<T>> score_rows;
  if (!fast) {
    for (const auto& x : xs) {
      std::vector<Var<T>> row;
      for (const auto& y : ys) row.push_back(mi_score(x.h, x.pad, y.h, y.pad, cfg, p));
      score_rows.push_back(reshape(concat_cols(std::span<const Var<T>>(row)), Shape{1, ys.size()}));
    }
    return concat_rows(std::span<const Var<T>>(score_rows));
  }

  const std::size_t d = cfg.hidden, heads = cfg.heads, dh = d / heads;
  const std::size_t tx = xs[0].h.rows();
  const std::string pre = "cross.layer0";
  const T eps = T(cfg.ln_eps);
  const T inv_scale = T(1) / std::sqrt(T(dh));
  for (const auto& y : ys) {
    if (1 + tx + y.h.rows() > cfg.max_positions) {
      throw ShapeError(detail::concat("score_slate: combined length ", 1 + tx + y.h.rows(),
                                      " exceeds max_positions ", cfg.max_positions));
    }
  }
  auto ln1 = [&](Var<T> r) { return layer_norm(r, p(pre + ".ln1.g"), p(pre + ".ln1.b"), eps); };
  auto proj = [&](Var<T> n, const char* w) {
    return detail::linear(n, p, pre + ".attn.w" + w, pre + ".attn.b" + w);
  };
  struct Projected {
    std::vector<Var<T>> logits;  // per head, 1 x rows, unscaled q0 . k
    std::vector<Var<T>> values;  // per head, rows x dh
  };
  auto r0 = add(reshape(p("cross.agg"), Shape{1, d}), detail::positions(p, 0, 1));
  auto n0 = ln1(r0);
  auto q0 = proj(n0, "q");
  auto project = [&](Var<T> normed) {
    Projected out;
    auto k = proj(normed, "k");
    auto v = proj(normed, "v");
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = heads == 1 ? q0 : slice_cols(q0, h * dh, dh);
      auto kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
      out.logits.push_back(matmul_nt(qh, kh));
      out.values.push_back(heads == 1 ? v : slice_cols(v, h * dh, dh));
    }
    return out;
  };
  const Projected slot = project(n0);
  std::vector<Projected> px, py;
  for (const auto& x : xs) {
    auto r = add(add_row(x.h, p("cross.type_x")), detail::positions(p, 1, tx));
    px.push_back(project(ln1(r)));
  }
  for (const auto& y : ys) {
    auto r = add(add_row(y.h, p("cross.type_y")), detail::positions(p, 1 + tx, y.h.rows()));
    py.push_back(project(ln1(r)));
  }
  auto r0_vec = reshape(r0, Shape{d});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::vector<Var<T>> attended;
    for (std::size_t j = 0; j < ys.size(); ++j) {
      PadMask pad{1};
      pad.insert(pad.end(), xs[i].pad.begin(), xs[i].pad.end());
      pad.insert(pad.end(), ys[j].pad.begin(), ys[j].pad.end());
      std::vector<Var<T>> head_out;
      for (std::size_t h = 0; h < heads; ++h) {
        auto logits = scale(concat_cols({slot.logits[h], px[i].logits[h], py[j].logits[h]}), inv_scale);
        auto w = masked_row_softmax(logits, std::span<const std::uint8_t>(pad));
        auto v = concat_rows({slot.values[h], px[i].values[h], py[j].values[h]});
        head_out.push_back(matmul(w, v));
      }
      attended.push_back(heads == 1 ? head_out[0] : concat_cols(std::span<const Var<T>>(head_out)));
    }
    auto merged = concat_rows(std::span<const Var<T>>(attended));  // |ys| x d
    auto attn = proj(merged, "o");
    auto z = add_row(attn, r0_vec);
    auto n2 = layer_norm(z, p(pre + ".ln2.g"), p(pre + ".ln2.b"), eps);
    auto ff = detail::linear(gelu(detail::linear(n2, p, pre + ".ff.w1", pre + ".ff.b1")), p,
                             pre + ".ff.w2", pre + ".ff.b2");
    auto out = add(z, ff);
    score_rows.push_back(reshape(detail::score_head(out, p), Shape{1, ys.size()}));
  }
  return concat_rows(std::span<const Var<T>>(score_rows));
}

// Candidate sets for in-batch negatives: example i is contrasted with
// every other example's token stream.
inline std::vector<std::vector<std::size_t>> build_cross_batch(std::size_t batch_size) {
  if (batch_size < 2) throw DataError("cross-modal batch needs at least two examples for negatives");
  std::vector<std::vector<std::size_t>> neg(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i)
    for (std::size_t j = 0; j < batch_size; ++j)
      if (j != i) neg[i].push_back(j);
  return neg;
}

// -log[exp(s_pos) / (exp(s_pos) + sum exp(s_neg))] for one slate.
template <std::floating_point T>
Var<T> cross_modal_nce(Var<T> positive, std::span<const Var<T>> negatives) {
  if (negatives.empty()) throw DataError("cross_modal_nce: empty candidate set");
  std::vector<Var<T>> parts{reshape(positive, Shape{1, 1})};
  for (const auto& n : negatives) parts.push_back(reshape(n, Shape{1, 1}));
  auto row = concat_cols(std::span<const Var<T>>(parts));
  std::vector<std::uint8_t> all(parts.size(), 1);
  auto lse = masked_row_logsumexp(row, std::move(all));
  return sum(sub(lse, pick(row, {0})));
}

// Batch form over a score matrix whose diagonal holds the true pairs:
// mean_i of -log softmax over {i} U negatives[i] at column i.
template <std::floating_point T>
Var<T> cross_modal_nce(Var<T> scores, const std::vector<std::vector<std::size_t>>& negatives) {
  const std::size_t b = scores.rows(), n = scores.cols();
  if (negatives.size() != b) throw ShapeError("cross_modal_nce: one candidate set per row required");
  std::vector<std::uint8_t> cand(b * n, 0);
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (negatives[i].empty()) throw DataError("cross_modal_nce: empty candidate set");
    diag[i] = i;
    cand[i * n + i] = 1;
    for (std::size_t j : negatives[i]) {
      if (j == i) throw DataError("cross_modal_nce: candidate set contains the positive");
      cand[i * n + j] = 1;
    }
  }
  auto lse = masked_row_logsumexp(scores, std::move(cand));
  return mean(sub(lse, pick(scores, std::move(diag))));
}

}  // namespace cbt
