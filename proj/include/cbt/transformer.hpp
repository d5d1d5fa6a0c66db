#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cbt/encoders.hpp"
#include "cbt/errors.hpp"
#include "cbt/graph.hpp"
#include "cbt/params.hpp"
#include "cbt/rng.hpp"

namespace cbt {

// Positions hidden from the encoder for masked prediction.
struct MaskPattern {
  std::vector<std::size_t> masked;  // sorted, distinct
  std::size_t sequence_length = 0;

  bool empty() const noexcept { return masked.empty(); }
  bool contains(std::size_t t) const {
    return std::binary_search(masked.begin(), masked.end(), t);
  }

  void validate(const PadMask& pad_mask) const {
    if (pad_mask.size() != sequence_length) {
      throw DataError(detail::concat("mask pattern length ", sequence_length,
                                     " differs from sequence length ", pad_mask.size()));
    }
    for (std::size_t i = 0; i < masked.size(); ++i) {
      const std::size_t t = masked[i];
      if (i && masked[i - 1] >= t) throw DataError("mask pattern indices must be sorted and distinct");
      if (t >= sequence_length) {
        throw DataError(detail::concat("masked index ", t, " >= sequence length ", sequence_length));
      }
      if (!pad_mask[t]) throw DataError(detail::concat("masked index ", t, " is a padded position"));
    }
  }
};

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t ff_width = 256;
  std::size_t max_positions = 64;
  double dropout = 0.0;
  double ln_eps = 1e-5;

  // layers == 0 is a degenerate configuration only tests may request.
  void validate(bool allow_degenerate = false) const {
    if (layers == 0 && !allow_degenerate) throw ConfigError("transformer needs at least one layer");
    if (heads == 0) throw ConfigError("transformer needs at least one attention head");
    if (hidden == 0 || ff_width == 0 || max_positions == 0) {
      throw ConfigError("transformer extents must be positive");
    }
    if (hidden % heads != 0) {
      throw ConfigError(detail::concat("hidden size ", hidden, " is not divisible by ", heads,
                                       " heads"));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }
};

// Training-time forward state. Without an rng, dropout is off.
struct ForwardContext {
  Rng* dropout_rng = nullptr;
};

namespace detail {

inline Tensor<double> trunc_normal(Rng& rng, std::size_t r, std::size_t c, double std = 0.02) {
  Tensor<double> w(Shape{r, c});
  for (auto& v : w.data()) v = rng.truncated_normal(std);
  return w;
}

inline Tensor<double> trunc_normal_vec(Rng& rng, std::size_t n, double std = 0.02) {
  Tensor<double> w(Shape{n});
  for (auto& v : w.data()) v = rng.truncated_normal(std);
  return w;
}

template <std::floating_point T>
Var<T> dropout(Var<T> x, double rate, const ForwardContext& ctx) {
  if (rate <= 0.0 || !ctx.dropout_rng) return x;
  Tensor<T> keep(x.shape());
  const T s = T(1) / T(1.0 - rate);
  for (auto& v : keep.data()) v = ctx.dropout_rng->uniform() < rate ? T(0) : s;
  return mul(x, x.graph->constant(std::move(keep)));
}

template <std::floating_point T>
Var<T> linear(Var<T> x, Binding<T>& p, const std::string& w, const std::string& b) {
  return add_row(matmul(x, p(w)), p(b));
}

}  // namespace detail

// Parameters of one pre-norm layer under `prefix` (e.g. "visual.layer0").
inline void init_transformer_layer(ParamStore<double>& store, const TransformerConfig& cfg,
                                   const std::string& prefix, const std::string& grp, Rng& rng) {
  const std::size_t d = cfg.hidden, f = cfg.ff_width;
  store.add(prefix + ".ln1.g", grp, Tensor<double>(Shape{d}, 1.0));
  store.add(prefix + ".ln1.b", grp, Tensor<double>(Shape{d}));
  for (const char* proj : {"q", "k", "v", "o"}) {
    store.add(prefix + ".attn.w" + proj, grp, detail::trunc_normal(rng, d, d));
    store.add(prefix + ".attn.b" + proj, grp, Tensor<double>(Shape{d}));
  }
  store.add(prefix + ".ln2.g", grp, Tensor<double>(Shape{d}, 1.0));
  store.add(prefix + ".ln2.b", grp, Tensor<double>(Shape{d}));
  store.add(prefix + ".ff.w1", grp, detail::trunc_normal(rng, d, f));
  store.add(prefix + ".ff.b1", grp, Tensor<double>(Shape{f}));
  store.add(prefix + ".ff.w2", grp, detail::trunc_normal(rng, f, d));
  store.add(prefix + ".ff.b2", grp, Tensor<double>(Shape{d}));
}

// Positional table plus `layers` layers under `prefix`. A learned mask
// vector is added when `with_mask_vector` is set (the visual stream; the
// text stream masks with the MASK token embedding instead).
inline void init_transformer(ParamStore<double>& store, const TransformerConfig& cfg,
                             const std::string& prefix, const std::string& grp, Rng& rng,
                             bool with_mask_vector) {
  cfg.validate(true);
  store.add(prefix + ".pos", grp, detail::trunc_normal(rng, cfg.max_positions, cfg.hidden));
  if (with_mask_vector) store.add(prefix + ".mask", grp, detail::trunc_normal_vec(rng, cfg.hidden));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    init_transformer_layer(store, cfg, prefix + ".layer" + std::to_string(l), grp, rng);
  }
}

// Rows in `m` replaced by `mask_vec`; all other rows unchanged.
template <std::floating_point T>
Var<T> apply_mask(Var<T> e, const MaskPattern& m, Var<T> mask_vec, const PadMask& pad_mask) {
  m.validate(pad_mask);
  if (e.rows() != m.sequence_length) {
    throw ShapeError(detail::concat("apply_mask: embeddings have ", e.rows(),
                                    " rows, mask pattern covers ", m.sequence_length));
  }
  if (m.empty()) return e;
  return replace_rows(e, std::span<const std::size_t>(m.masked), mask_vec);
}

// Scaled dot-product attention of `queries` against `keys_values`, both
// already layer-normed. Padded keys are excluded from every softmax; rows of
// the output at padded queries are zeroed (`query_pad` may be empty when
// every query is real).
template <std::floating_point T>
Var<T> multi_head_attention(Var<T> queries, Var<T> keys_values, const PadMask& key_pad,
                            const PadMask& query_pad, const TransformerConfig& cfg,
                            const std::string& prefix, Binding<T>& p) {
  const std::size_t d = cfg.hidden, heads = cfg.heads, dh = d / heads;
  if (queries.cols() != d || keys_values.cols() != d) {
    throw ShapeError(detail::concat("attention: inputs ", detail::shape_string(queries.shape()), " / ",
                                    detail::shape_string(keys_values.shape()), " vs hidden ", d));
  }
  if (key_pad.size() != keys_values.rows()) throw ShapeError("attention: key pad mask length");
  auto q = detail::linear(queries, p, prefix + ".wq", prefix + ".bq");
  auto k = detail::linear(keys_values, p, prefix + ".wk", prefix + ".bk");
  auto v = detail::linear(keys_values, p, prefix + ".wv", prefix + ".bv");
  const T inv_scale = T(1) / std::sqrt(T(dh));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    auto kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    auto vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    auto logits = scale(matmul_nt(qh, kh), inv_scale);
    auto weights = masked_row_softmax(logits, std::span<const std::uint8_t>(key_pad));
    outs.push_back(matmul(weights, vh));
  }
  auto merged = heads == 1 ? outs[0] : concat_cols(std::span<const Var<T>>(outs));
  auto out = detail::linear(merged, p, prefix + ".wo", prefix + ".bo");
  if (!query_pad.empty()) out = row_mask(out, std::span<const std::uint8_t>(query_pad));
  return out;
}

// Self-attention form.
template <std::floating_point T>
Var<T> multi_head_attention(Var<T> h, const PadMask& pad_mask, const TransformerConfig& cfg,
                            const std::string& prefix, Binding<T>& p) {
  return multi_head_attention(h, h, pad_mask, pad_mask, cfg, prefix, p);
}

// One pre-norm layer: x + Attn(LN(x)), then + FF(LN(.)). When
// `query_rows` is given only those rows are produced (keys still cover
// every position).
template <std::floating_point T>
Var<T> transformer_layer(Var<T> x, const PadMask& pad_mask, const TransformerConfig& cfg,
                         const std::string& prefix, Binding<T>& p, const ForwardContext& ctx,
                         const std::vector<std::size_t>* query_rows = nullptr) {
  const T eps = T(cfg.ln_eps);
  auto normed = layer_norm(x, p(prefix + ".ln1.g"), p(prefix + ".ln1.b"), eps);
  Var<T> residual = x;
  Var<T> queries = normed;
  PadMask query_pad = pad_mask;
  if (query_rows) {
    residual = gather_rows(x, *query_rows);
    queries = gather_rows(normed, *query_rows);
    query_pad.clear();
    for (std::size_t r : *query_rows) query_pad.push_back(pad_mask[r]);
  }
  auto attn = multi_head_attention(queries, normed, pad_mask, query_pad, cfg, prefix + ".attn", p);
  auto h = add(residual, detail::dropout(attn, cfg.dropout, ctx));
  auto normed2 = layer_norm(h, p(prefix + ".ln2.g"), p(prefix + ".ln2.b"), eps);
  auto ff = gelu(detail::linear(normed2, p, prefix + ".ff.w1", prefix + ".ff.b1"));
  ff = detail::linear(ff, p, prefix + ".ff.w2", prefix + ".ff.b2");
  return add(h, detail::dropout(ff, cfg.dropout, ctx));
}

// Bidirectional context encoder: mask, add positions, run the layers.
// Output rows at padded positions are zero; for masked t, row t is the
// prediction for the hidden frame.
template <std::floating_point T>
Var<T> encode_context(Var<T> e, const MaskPattern& m, const PadMask& pad_mask,
                      const TransformerConfig& cfg, const std::string& prefix, Binding<T>& p,
                      std::optional<Var<T>> mask_vec = std::nullopt,
                      const ForwardContext& ctx = {}) {
  const std::size_t len = e.rows();
  if (len > cfg.max_positions) {
    throw ShapeError(detail::concat("encode_context: sequence of ", len,
                                    " exceeds max_positions ", cfg.max_positions));
  }
  if (e.cols() != cfg.hidden) {
    throw ShapeError(detail::concat("encode_context: embeddings ", detail::shape_string(e.shape()),
                                    " vs hidden ", cfg.hidden));
  }
  if (pad_mask.size() != len) throw ShapeError("encode_context: pad mask length");
  auto vec = mask_vec ? *mask_vec : p(prefix + ".mask");
  auto x = apply_mask(e, m, vec, pad_mask);
  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  x = add(x, gather_rows(p(prefix + ".pos"), std::move(positions)));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    x = transformer_layer(x, pad_mask, cfg, prefix + ".layer" + std::to_string(l), p, ctx);
  }
  return row_mask(x, std::span<const std::uint8_t>(pad_mask));
}

}  // namespace cbt
