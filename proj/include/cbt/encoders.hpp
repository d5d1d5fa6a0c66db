#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "cbt/errors.hpp"
#include "cbt/graph.hpp"
#include "cbt/params.hpp"
#include "cbt/rng.hpp"
#include "cbt/tensor.hpp"

namespace cbt {

inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kMaskId = 1;
inline constexpr std::int64_t kReservedIds = 2;

using PadMask = std::vector<std::uint8_t>;

namespace detail {

inline void check_right_padded(const PadMask& mask, const char* what) {
  bool seen_pad = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) {
      seen_pad = true;
    } else if (seen_pad) {
      throw DataError(concat(what, ": real position ", i, " follows padding"));
    }
  }
}

inline std::size_t real_length(const PadMask& mask) {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  return n;
}

}  // namespace detail

// A T x D_in matrix of real-valued frames, right-padded with zero rows.
struct FeatureSequence {
  Tensor<double> values;
  PadMask pad_mask;

  std::size_t length() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
  std::size_t real_length() const { return detail::real_length(pad_mask); }

  static FeatureSequence padded(Tensor<double> values, std::size_t real) {
    FeatureSequence s{std::move(values), {}};
    s.pad_mask.assign(s.values.rows(), 0);
    for (std::size_t i = 0; i < real && i < s.pad_mask.size(); ++i) s.pad_mask[i] = 1;
    for (std::size_t i = real; i < s.values.rows(); ++i) {
      auto r = s.values.row(i);
      std::fill(r.begin(), r.end(), 0.0);
    }
    return s;
  }

  void validate() const {
    if (values.rank() != 2) throw DataError("feature sequence must be a T x D matrix");
    if (pad_mask.size() != values.rows()) throw DataError("feature pad mask length differs from T");
    detail::check_right_padded(pad_mask, "feature sequence");
    for (std::size_t t = 0; t < values.rows(); ++t) {
      if (pad_mask[t]) continue;
      for (double v : values.row(t)) {
        if (v != 0.0) throw DataError(detail::concat("padded frame ", t, " is not zero"));
      }
    }
  }
};

// Vocabulary ids, right-padded with kPadId.
struct TokenSequence {
  std::vector<std::int64_t> ids;
  PadMask pad_mask;

  std::size_t length() const { return ids.size(); }
  std::size_t real_length() const { return detail::real_length(pad_mask); }

  void validate(std::size_t vocab) const {
    if (ids.empty()) throw DataError("token sequence is empty");
    if (pad_mask.size() != ids.size()) throw DataError("token pad mask length differs from ids");
    detail::check_right_padded(pad_mask, "token sequence");
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
        throw DataError(detail::concat("token id ", ids[t], " at position ", t,
                                       " outside vocabulary of ", vocab));
      }
      if (!pad_mask[t] && ids[t] != kPadId) {
        throw DataError(detail::concat("padded position ", t, " holds id ", ids[t]));
      }
    }
  }
};

// Position-wise two-layer frame encoder: D_in -> hidden -> output.
struct EncoderConfig {
  std::size_t input_dim = 16;
  std::size_t hidden = 64;
  std::size_t output_dim = 64;
};

inline void init_encoder(ParamStore<double>& store, const EncoderConfig& cfg, Rng& rng,
                         const std::string& prefix = "visual.enc") {
  auto weight = [&](std::size_t r, std::size_t c) {
    Tensor<double> w(Shape{r, c});
    for (auto& v : w.data()) v = rng.truncated_normal(0.02);
    return w;
  };
  store.add(prefix + ".w1", group::visual_encoder, weight(cfg.input_dim, cfg.hidden));
  store.add(prefix + ".b1", group::visual_encoder, Tensor<double>(Shape{cfg.hidden}));
  store.add(prefix + ".w2", group::visual_encoder, weight(cfg.hidden, cfg.output_dim));
  store.add(prefix + ".b2", group::visual_encoder, Tensor<double>(Shape{cfg.output_dim}));
}

// e_t = W2 gelu(W1 x_t + b1) + b2 for real t, zero at padded t.
template <std::floating_point T>
Var<T> encode_features(Var<T> x, const PadMask& pad_mask, const EncoderConfig& cfg,
                       Binding<T>& params, const std::string& prefix = "visual.enc") {
  if (x.value().rank() != 2 || x.cols() != cfg.input_dim) {
    throw ShapeError(detail::concat("encode_features: input ", detail::shape_string(x.shape()),
                                    " but encoder expects width ", cfg.input_dim));
  }
  auto hidden = gelu(add_row(matmul(x, params(prefix + ".w1")), params(prefix + ".b1")));
  auto out = add_row(matmul(hidden, params(prefix + ".w2")), params(prefix + ".b2"));
  return row_mask(out, pad_mask);
}

template <std::floating_point T>
Var<T> encode_features(const FeatureSequence& x, const EncoderConfig& cfg, Binding<T>& params,
                       const std::string& prefix = "visual.enc") {
  if (x.dim() != cfg.input_dim) {
    throw ShapeError(detail::concat("encode_features: input width ", x.dim(),
                                    " but encoder expects ", cfg.input_dim));
  }
  auto input = params.graph().constant(x.values.template cast<T>());
  return encode_features(input, x.pad_mask, cfg, params, prefix);
}

// Row t is table[ids[t]]; padded positions are zero rows and pass no
// gradient to the PAD row.
template <std::floating_point T>
Var<T> embed_tokens(const TokenSequence& y, Var<T> table) {
  const std::size_t vocab = table.rows();
  std::vector<std::size_t> rows(y.ids.size());
  for (std::size_t t = 0; t < y.ids.size(); ++t) {
    if (y.ids[t] < 0 || static_cast<std::size_t>(y.ids[t]) >= vocab) {
      throw DataError(detail::concat("embed_tokens: id ", y.ids[t], " at position ", t,
                                     " outside vocabulary of ", vocab));
    }
    rows[t] = static_cast<std::size_t>(y.ids[t]);
  }
  if (y.pad_mask.size() != y.ids.size()) throw DataError("embed_tokens: pad mask length differs");
  return row_mask(gather_rows(table, std::move(rows)), y.pad_mask);
}

}  // namespace cbt
