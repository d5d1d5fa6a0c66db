#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbt/crossmodal.hpp"
#include "cbt/encoders.hpp"
#include "cbt/io.hpp"
#include "cbt/losses.hpp"
#include "cbt/params.hpp"
#include "cbt/rng.hpp"
#include "cbt/transformer.hpp"

namespace cbt {

// Every architectural setting of the model.
struct ModelConfig {
  EncoderConfig encoder;
  TransformerConfig visual;
  TransformerConfig text{1, 4, 64, 256, 64, 0.0, 1e-5};
  CrossModalConfig cross;
  std::size_t vocab = 64;
  NceOptions nce;

  void validate() const {
    visual.validate();
    text.validate();
    cross.validate();
    if (encoder.input_dim == 0 || encoder.hidden == 0 || encoder.output_dim == 0) {
      throw ConfigError("encoder widths must be positive");
    }
    if (encoder.output_dim != visual.hidden) {
      throw ConfigError(detail::concat("encoder output width ", encoder.output_dim,
                                       " differs from visual hidden size ", visual.hidden));
    }
    if (text.hidden != visual.hidden || cross.hidden != visual.hidden) {
      throw ConfigError("visual, text and cross-modal hidden sizes must agree");
    }
    if (vocab <= static_cast<std::size_t>(kReservedIds)) {
      throw ConfigError("vocab must exceed the two reserved ids");
    }
    if (!(nce.temperature > 0.0)) throw ConfigError("nce temperature must be positive");
  }
};

inline json transformer_to_json(const TransformerConfig& c) {
  return json{{"layers", c.layers},   {"heads", c.heads},
              {"hidden", c.hidden},   {"ff_width", c.ff_width},
              {"max_positions", c.max_positions}, {"dropout", c.dropout},
              {"ln_eps", c.ln_eps}};
}

inline TransformerConfig transformer_from_json(const json& j, const std::string& where,
                                               TransformerConfig c) {
  StrictObject o(j, where);
  o.get("layers", c.layers);
  o.get("heads", c.heads);
  o.get("hidden", c.hidden);
  o.get("ff_width", c.ff_width);
  o.get("max_positions", c.max_positions);
  o.get("dropout", c.dropout);
  o.get("ln_eps", c.ln_eps);
  o.finish();
  return c;
}

inline void to_json(json& j, const ModelConfig& m) {
  j = json{{"encoder", {{"input_dim", m.encoder.input_dim},
                        {"hidden", m.encoder.hidden},
                        {"output_dim", m.encoder.output_dim}}},
           {"visual", transformer_to_json(m.visual)},
           {"text", transformer_to_json(m.text)},
           {"cross", {{"layers", m.cross.layers},
                      {"heads", m.cross.heads},
                      {"hidden", m.cross.hidden},
                      {"ff_width", m.cross.ff_width},
                      {"max_positions", m.cross.max_positions},
                      {"head_hidden", m.cross.head_hidden},
                      {"aggregate", m.cross.aggregate == Aggregate::slot0 ? "slot0" : "avgpool"},
                      {"ln_eps", m.cross.ln_eps}}},
           {"vocab", m.vocab},
           {"nce", {{"temperature", m.nce.temperature}, {"normalize", m.nce.normalize}}}};
}

inline ModelConfig model_config_from_json(const json& j, const std::string& where = "model") {
  ModelConfig m;
  StrictObject o(j, where);
  if (const json* e = o.child("encoder")) {
    StrictObject eo(*e, where + ".encoder");
    eo.get("input_dim", m.encoder.input_dim);
    eo.get("hidden", m.encoder.hidden);
    eo.get("output_dim", m.encoder.output_dim);
    eo.finish();
  }
  if (const json* v = o.child("visual")) m.visual = transformer_from_json(*v, where + ".visual", m.visual);
  if (const json* t = o.child("text")) m.text = transformer_from_json(*t, where + ".text", m.text);
  if (const json* c = o.child("cross")) {
    StrictObject co(*c, where + ".cross");
    co.get("layers", m.cross.layers);
    co.get("heads", m.cross.heads);
    co.get("hidden", m.cross.hidden);
    co.get("ff_width", m.cross.ff_width);
    co.get("max_positions", m.cross.max_positions);
    co.get("head_hidden", m.cross.head_hidden);
    std::string agg = m.cross.aggregate == Aggregate::slot0 ? "slot0" : "avgpool";
    co.get("aggregate", agg);
    if (agg == "slot0") {
      m.cross.aggregate = Aggregate::slot0;
    } else if (agg == "avgpool") {
      m.cross.aggregate = Aggregate::avgpool;
    } else {
      throw ConfigError(where + ".cross.aggregate: expected \"slot0\" or \"avgpool\"");
    }
    co.get("ln_eps", m.cross.ln_eps);
    co.finish();
  }
  o.get("vocab", m.vocab);
  if (const json* n = o.child("nce")) {
    StrictObject no(*n, where + ".nce");
    no.get("temperature", m.nce.temperature);
    no.get("normalize", m.nce.normalize);
    no.finish();
  }
  o.finish();
  return m;
}

// Fresh parameters, a deterministic function of (cfg, seed).
inline ParamStore<double> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<double> store;
  Rng rng = Rng::derive(seed, 2);
  init_encoder(store, cfg.encoder, rng);
  init_transformer(store, cfg.visual, "visual", group::visual_transformer, rng, true);
  Tensor<double> table = detail::trunc_normal(rng, cfg.vocab, cfg.text.hidden);
  for (std::size_t c = 0; c < cfg.text.hidden; ++c) table(kPadId, c) = 0.0;
  store.add("text.embed", group::text, std::move(table));
  init_transformer(store, cfg.text, "text", group::text, rng, false);
  init_crossmodal(store, cfg.cross, rng);
  return store;
}

template <std::floating_point T>
struct VisualForward {
  Var<T> embeddings;  // e, before masking
  Var<T> context;     // h
};

template <std::floating_point T>
VisualForward<T> visual_forward(const FeatureSequence& x, const MaskPattern& m, const ModelConfig& cfg,
                                Binding<T>& p, const ForwardContext& ctx = {}) {
  auto e = encode_features(x, cfg.encoder, p);
  auto h = encode_context(e, m, x.pad_mask, cfg.visual, "visual", p, std::optional<Var<T>>{}, ctx);
  return VisualForward<T>{e, h};
}

// Text stream: masked positions take the MASK token's embedding.
template <std::floating_point T>
Var<T> text_forward(const TokenSequence& y, const MaskPattern& m, const ModelConfig& cfg, Binding<T>& p,
                    const ForwardContext& ctx = {}) {
  auto table = p("text.embed");
  auto e = embed_tokens(y, table);
  auto mask_vec = reshape(gather_rows(table, {static_cast<std::size_t>(kMaskId)}), Shape{cfg.text.hidden});
  return encode_context(e, m, y.pad_mask, cfg.text, "text", p, std::optional<Var<T>>(mask_vec), ctx);
}

// Contextual features of an unmasked sequence, evaluated without gradients.
template <std::floating_point T>
Tensor<T> visual_features(const FeatureSequence& x, const ModelConfig& cfg, const ParamStore<T>& store) {
  Graph<T> g;
  Binding<T> p(g, store, true);
  return visual_forward(x, MaskPattern{{}, x.length()}, cfg, p).context.value();
}

}  // namespace cbt
