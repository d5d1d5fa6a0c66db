#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cbt/crossmodal.hpp"
#include "cbt/io.hpp"
#include "cbt/losses.hpp"
#include "cbt/model.hpp"
#include "cbt/params.hpp"
#include "cbt/rng.hpp"
#include "cbt/synthdata.hpp"

namespace cbt {

inline constexpr const char* kArtifactVersion = "0.1.0";

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t steps = 200;
  double learning_rate = 1e-3;
  double decay_fraction = 1.0;  // lr falls linearly to lr * (1 - decay_fraction) at the last step
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;       // 0 disables clipping
  std::uint64_t seed = 1;
  LossWeights weights;
  std::size_t mask_count = 6;
  std::size_t text_warmup_steps = 0;  // token-only steps before the main phase; text is frozen after
  std::vector<std::string> freeze_groups;
  std::string precision = "f64";      // "f64" or "f32"
  double test_fraction = 0.4;         // trailing share of the corpus never seen in pretraining
  std::size_t checkpoint_every = 0;   // 0: only the final checkpoint

  void validate() const {
    weights.validate();
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (weights.cross > 0.0 && batch_size < 2) {
      throw ConfigError("train.batch_size must be at least 2 when the cross-modal weight is positive");
    }
    if (learning_rate < 0.0) throw ConfigError("train.learning_rate must be non-negative");
    if (decay_fraction < 0.0 || decay_fraction > 1.0) throw ConfigError("train.decay_fraction must lie in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
    if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be non-negative");
    if (mask_count == 0) throw ConfigError("train.mask_count must be positive");
    if (precision != "f64" && precision != "f32") throw ConfigError("train.precision must be \"f64\" or \"f32\"");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("train.test_fraction must lie in (0, 1)");
    for (const auto& g : freeze_groups) {
      if (g != group::visual_encoder && g != group::visual_transformer && g != group::text && g != group::cross) {
        throw ConfigError("train.freeze_groups: unknown group '" + g + "'");
      }
    }
  }

  std::size_t total_steps() const { return text_warmup_steps + steps; }
};

inline void to_json(json& j, const TrainConfig& t) {
  j = json{{"batch_size", t.batch_size},
           {"steps", t.steps},
           {"learning_rate", t.learning_rate},
           {"decay_fraction", t.decay_fraction},
           {"beta1", t.beta1},
           {"beta2", t.beta2},
           {"adam_eps", t.adam_eps},
           {"clip_norm", t.clip_norm},
           {"seed", t.seed},
           {"weights", {{"bert", t.weights.bert}, {"visual", t.weights.visual}, {"cross", t.weights.cross}}},
           {"mask_count", t.mask_count},
           {"text_warmup_steps", t.text_warmup_steps},
           {"freeze_groups", t.freeze_groups},
           {"precision", t.precision},
           {"test_fraction", t.test_fraction},
           {"checkpoint_every", t.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j, const std::string& where = "train") {
  TrainConfig t;
  StrictObject o(j, where);
  o.get("batch_size", t.batch_size);
  o.get("steps", t.steps);
  o.get("learning_rate", t.learning_rate);
  o.get("decay_fraction", t.decay_fraction);
  o.get("beta1", t.beta1);
  o.get("beta2", t.beta2);
  o.get("adam_eps", t.adam_eps);
  o.get("clip_norm", t.clip_norm);
  o.get("seed", t.seed);
  if (const json* w = o.child("weights")) {
    StrictObject wo(*w, where + ".weights");
    wo.get("bert", t.weights.bert);
    wo.get("visual", t.weights.visual);
    wo.get("cross", t.weights.cross);
    wo.finish();
  }
  o.get("mask_count", t.mask_count);
  o.get("text_warmup_steps", t.text_warmup_steps);
  o.get("freeze_groups", t.freeze_groups);
  o.get("precision", t.precision);
  o.get("test_fraction", t.test_fraction);
  o.get("checkpoint_every", t.checkpoint_every);
  o.finish();
  return t;
}

struct LossComponents {
  double bert = 0.0;
  double visual = 0.0;
  double cross = 0.0;
  double total = 0.0;
};

// Adam moments and per-parameter update counts.
template <std::floating_point T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  std::map<std::string, std::uint64_t> t;

  bool operator==(const AdamState&) const = default;

  template <std::floating_point U>
  AdamState<U> cast() const {
    AdamState<U> out;
    for (const auto& [k, x] : m) out.m.emplace(k, x.template cast<U>());
    for (const auto& [k, x] : v) out.v.emplace(k, x.template cast<U>());
    out.t = t;
    return out;
  }
};

template <std::floating_point T>
struct TrainState {
  ParamStore<T> params;
  AdamState<T> adam;
  std::size_t step = 0;  // completed steps, warm-up included
};

// One training example: both streams plus the masks used this step.
struct StepExample {
  const LabeledSequence* seq = nullptr;
  MaskPattern visual_mask;
  MaskPattern text_mask;  // empty unless the token objective is active
};

// Learning rate for main-phase step `k` of `steps`.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t k, std::size_t steps) {
  if (steps == 0) return cfg.learning_rate;
  const double frac = double(k) / double(steps);
  return cfg.learning_rate * (1.0 - cfg.decay_fraction * frac);
}

template <std::floating_point T>
struct LossGraph {
  Var<T> total;
  LossComponents values;
};

namespace detail {

template <std::floating_point T>
void require_finite_loss(Var<T> v, const char* component) {
  const T x = v.value().item();
  if (!std::isfinite(x)) {
    throw NumericError(component, concat("non-finite ", component, " loss (", x, ")"));
  }
}

}  // namespace detail

// Builds every weighted loss term of one batch in `p`'s graph. Terms with
// zero weight are not evaluated and report 0.
template <std::floating_point T>
LossGraph<T> build_loss(std::span<const StepExample> batch, const ModelConfig& model, const LossWeights& w,
                        Binding<T>& p, const ForwardContext& ctx = {}) {
  w.validate();
  if (batch.empty()) throw DataError("empty training batch");
  Graph<T>& g = p.graph();
  const bool need_visual = w.visual > 0.0 || w.cross > 0.0;
  const bool need_text = w.bert > 0.0 || w.cross > 0.0;
  LossGraph<T> out;
  auto zero = g.constant(Tensor<T>::scalar(T(0)));
  Var<T> l_visual = zero, l_bert = zero, l_cross = zero;

  std::vector<Stream<T>> xs, ys;
  if (need_visual) {
    std::vector<EncodedSequence<T>> encoded;
    for (const auto& ex : batch) {
      auto fw = visual_forward(ex.seq->x, ex.visual_mask, model, p, ctx);
      encoded.push_back(EncodedSequence<T>{fw.embeddings, fw.context, SequenceSlots{ex.seq->x.pad_mask, ex.visual_mask}});
      xs.push_back(Stream<T>{fw.context, ex.seq->x.pad_mask});
    }
    if (w.visual > 0.0) {
      l_visual = visual_nce(build_batch_view(std::span<const EncodedSequence<T>>(encoded)), model.nce);
      detail::require_finite_loss(l_visual, "l_visual");
    }
  }
  if (need_text) {
    std::vector<TokenPrediction<T>> preds;
    for (const auto& ex : batch) {
      const MaskPattern tm = w.bert > 0.0 ? ex.text_mask : MaskPattern{{}, ex.seq->y.ids.size()};
      auto h = text_forward(ex.seq->y, tm, model, p, ctx);
      ys.push_back(Stream<T>{h, ex.seq->y.pad_mask});
      if (w.bert > 0.0) preds.push_back(TokenPrediction<T>{h, &ex.seq->y, &ex.text_mask});
    }
    if (w.bert > 0.0) {
      l_bert = bert_pseudo_nll(std::span<const TokenPrediction<T>>(preds), p("text.embed"));
      detail::require_finite_loss(l_bert, "l_bert");
    }
  }
  if (w.cross > 0.0) {
    auto scores = score_slate(std::span<const Stream<T>>(xs), std::span<const Stream<T>>(ys), model.cross, p);
    l_cross = cross_modal_nce(scores, build_cross_batch(batch.size()));
    detail::require_finite_loss(l_cross, "l_cross");
  }
  out.total = combined_loss(l_bert, l_visual, l_cross, w);
  detail::require_finite_loss(out.total, "l_total");
  out.values = LossComponents{double(l_bert.value().item()), double(l_visual.value().item()),
                              double(l_cross.value().item()), double(out.total.value().item())};
  return out;
}

// Adam update of every parameter in `grads` (frozen groups never appear there).
template <std::floating_point T>
void adam_update(ParamStore<T>& params, AdamState<T>& adam, std::map<std::string, Tensor<T>>& grads,
                 const TrainConfig& cfg, double lr) {
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [_, gr] : grads)
      for (T x : gr.data()) sq += double(x) * double(x);
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) {
      const T s = T(cfg.clip_norm / norm);
      for (auto& [_, gr] : grads)
        for (auto& x : gr.data()) x *= s;
    }
  }
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2), eps = T(cfg.adam_eps), rate = T(lr);
  for (auto& [name, gr] : grads) {
    if (!params.trainable(name)) continue;
    auto& w = params.mutable_ref(name);
    auto [mit, _m] = adam.m.try_emplace(name, w.shape(), T(0));
    auto [vit, _v] = adam.v.try_emplace(name, w.shape(), T(0));
    const std::uint64_t t = ++adam.t[name];
    const T c1 = T(1) - T(std::pow(double(b1), double(t)));
    const T c2 = T(1) - T(std::pow(double(b2), double(t)));
    auto& m = mit->second;
    auto& v = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = gr[i];
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] -= rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// One forward pass over every weighted term, one backward pass, one Adam
// update. `lr` is the scheduled learning rate for this step.
template <std::floating_point T>
LossComponents train_step(TrainState<T>& state, std::span<const StepExample> batch, const ModelConfig& model,
                          const TrainConfig& cfg, const LossWeights& weights, double lr,
                          Rng* dropout_rng = nullptr, const std::set<std::string>& hold = {}) {
  Graph<T> g;
  Binding<T> p(g, state.params);
  for (const auto& grp : hold) p.hold(grp);
  const ForwardContext ctx{dropout_rng};
  auto loss = build_loss(batch, model, weights, p, ctx);
  auto grads = p.gradients(g.backward(loss.total));
  for (const auto& [name, gr] : grads) {
    if (!assert_finite(gr).ok) throw NumericError("gradient", "non-finite gradient for " + name);
  }
  adam_update(state.params, state.adam, grads, cfg, lr);
  ++state.step;
  return loss.values;
}

// The training/test split used by pretraining and probes.
inline std::pair<Split, Split> corpus_split(const Corpus& corpus, const TrainConfig& cfg) {
  return train_test_split(corpus.sequences.size(), cfg.test_fraction);
}

// Batch for global step `step`: a deterministic function of (seed, step),
// which is what makes resumed runs match uninterrupted ones.
inline std::vector<StepExample> sample_batch(const Corpus& corpus, Split train, const TrainConfig& cfg,
                                             std::size_t step, bool with_text_masks) {
  if (train.size() < cfg.batch_size) {
    throw DataError(detail::concat("training split of ", train.size(), " sequences is smaller than batch ",
                                   cfg.batch_size));
  }
  Rng rng = Rng::derive(cfg.seed, 3, step);
  std::vector<std::size_t> pick = rng.choose(train.size(), cfg.batch_size);
  rng.shuffle(pick.begin(), pick.end());
  std::vector<StepExample> batch;
  for (std::size_t i : pick) {
    const LabeledSequence& s = corpus.sequences[train.begin + i];
    StepExample ex;
    ex.seq = &s;
    const std::size_t real = s.x.real_length();
    ex.visual_mask = sample_masks(real, std::min(cfg.mask_count, real), rng, s.x.length());
    if (with_text_masks) {
      const std::size_t treal = detail::real_length(s.y.pad_mask);
      ex.text_mask = sample_masks(treal, std::min(cfg.mask_count, treal), rng, s.y.ids.size());
    } else {
      ex.text_mask = MaskPattern{{}, s.y.ids.size()};
    }
    batch.push_back(std::move(ex));
  }
  return batch;
}

struct StepRecord {
  std::size_t step = 0;
  LossComponents loss;
  double learning_rate = 0.0;
  double wall_ms = 0.0;
};

inline json to_json_record(const StepRecord& r) {
  return json{{"step", r.step},           {"l_bert", r.loss.bert},        {"l_visual", r.loss.visual},
              {"l_cross", r.loss.cross},  {"l_total", r.loss.total},      {"learning_rate", r.learning_rate},
              {"wall_ms", r.wall_ms}};
}

template <std::floating_point T>
TrainState<T> initial_state(const ModelConfig& model, const TrainConfig& cfg) {
  TrainState<T> s{init_params(model, cfg.seed).template cast<T>(), {}, 0};
  for (const auto& g : cfg.freeze_groups) s.params.freeze(g);
  return s;
}

// Runs the schedule from `state.step` up to `until` (default: the whole
// budget). The warm-up phase trains only the text group on the token
// objective, then freezes it.
template <std::floating_point T>
void run_training(TrainState<T>& state, const Corpus& corpus, const ModelConfig& model, const TrainConfig& cfg,
                  const std::function<void(const StepRecord&, const TrainState<T>&)>& on_step = {},
                  std::optional<std::size_t> until = std::nullopt) {
  cfg.validate();
  model.validate();
  const Split train = corpus_split(corpus, cfg).first;
  const std::size_t end = std::min(until.value_or(cfg.total_steps()), cfg.total_steps());
  const bool warm = cfg.text_warmup_steps > 0;
  while (state.step < end) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t step = state.step;
    const bool warmup = step < cfg.text_warmup_steps;
    if (warm && !warmup && !state.params.is_frozen(group::text)) state.params.freeze(group::text);
    LossWeights w = warmup ? LossWeights{1.0, 0.0, 0.0} : cfg.weights;
    const double lr = warmup ? scheduled_lr(cfg, step, cfg.text_warmup_steps)
                             : scheduled_lr(cfg, step - cfg.text_warmup_steps, cfg.steps);
    auto batch = sample_batch(corpus, train, cfg, step, w.bert > 0.0);
    Rng dropout_rng = Rng::derive(cfg.seed, 4, step);
    // Only the text group moves during warm-up.
    std::set<std::string> hold;
    if (warmup)
      for (const auto& gname : state.params.groups())
        if (gname != group::text) hold.insert(gname);
    const LossComponents loss =
        train_step(state, std::span<const StepExample>(batch), model, cfg, w, lr, &dropout_rng, hold);
    if (warm && state.step == cfg.text_warmup_steps) state.params.freeze(group::text);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_step) on_step(StepRecord{state.step, loss, lr, ms}, state);
  }
}

// Loss components of a batch without updating anything.
template <std::floating_point T>
LossComponents evaluate_loss(const ParamStore<T>& params, std::span<const StepExample> batch, const ModelConfig& model,
                             const LossWeights& w) {
  Graph<T> g;
  Binding<T> p(g, params, true);
  return build_loss(batch, model, w, p).values;
}

// ---- checkpoints ---------------------------------------------------------------
// "CBTK", u32 version, u64 metadata length, canonical JSON metadata, then
// per tensor: u32 name length, name, u32 rank, u64 extents, f64 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kCheckpointSchema = "cbt-checkpoint/1";

struct Checkpoint {
  ParamStore<double> params;
  AdamState<double> adam;
  std::size_t step = 0;
  json metadata;
};

namespace detail {

inline void put_tensor(std::string& out, const std::string& name, const Tensor<double>& t) {
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) io::put_le<std::uint64_t>(out, e);
  for (double v : t.data()) io::put_f64(out, v);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  const unsigned char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(ErrorKind::checkpoint_truncated,
                            concat("checkpoint truncated at byte ", pos_, " (needed ", n, " more)"));
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
    pos_ += n;
    return p;
  }
  template <typename U>
  U le() {
    return io::get_le<U>(take(sizeof(U)));
  }
  std::string str(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <std::floating_point T>
std::string encode_checkpoint(const TrainState<T>& state, json extra = json::object()) {
  const auto params = state.params.template cast<double>();
  const auto adam = state.adam.template cast<double>();
  json groups = json::object();
  for (const auto& name : params.names()) groups[name] = params.group_of(name);
  json steps = json::object();
  for (const auto& [name, t] : adam.t) steps[name] = t;
  json meta = std::move(extra);
  meta["schema_version"] = kCheckpointSchema;
  meta["artifact_version"] = kArtifactVersion;
  meta["step"] = state.step;
  meta["groups"] = groups;
  meta["frozen"] = params.frozen_groups();
  meta["adam_steps"] = steps;
  meta["tensor_count"] = params.size() + adam.m.size() + adam.v.size();
  const std::string meta_text = canonical(meta);

  std::string out = "CBTK";
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  for (const auto& name : params.names()) detail::put_tensor(out, name, params.get(name));
  for (const auto& [name, t] : adam.m) detail::put_tensor(out, "opt.m." + name, t);
  for (const auto& [name, t] : adam.v) detail::put_tensor(out, "opt.v." + name, t);
  return out;
}

// Parses a checkpoint completely before returning anything.
inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.str(4) != "CBTK") throw CheckpointError(ErrorKind::checkpoint_version, "not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(ErrorKind::checkpoint_version,
                          detail::concat("checkpoint format version ", version, ", expected ", kCheckpointVersion));
  }
  const auto meta_len = r.le<std::uint64_t>();
  json meta;
  try {
    meta = json::parse(r.str(meta_len));
  } catch (const json::exception& e) {
    throw CheckpointError(ErrorKind::checkpoint_truncated, std::string("checkpoint metadata unreadable: ") + e.what());
  }
  if (meta.value("schema_version", std::string()) != kCheckpointSchema) {
    throw CheckpointError(ErrorKind::checkpoint_version, "checkpoint schema version mismatch");
  }
  Checkpoint ck;
  ck.metadata = meta;
  ck.step = meta.at("step").get<std::size_t>();
  const auto count = meta.at("tensor_count").get<std::size_t>();
  const auto& groups = meta.at("groups");
  for (std::size_t k = 0; k < count; ++k) {
    const std::string name = r.str(r.le<std::uint32_t>());
    const auto rank = r.le<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.le<std::uint64_t>());
    const std::size_t n = shape_size(shape);
    if (rank == 0 || n == 0 || n > bytes.size()) {
      throw CheckpointError(ErrorKind::checkpoint_shape, "checkpoint tensor '" + name + "' has an invalid shape");
    }
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(r.le<std::uint64_t>());
    Tensor<double> t(shape, std::move(values));
    if (name.rfind("opt.m.", 0) == 0) {
      ck.adam.m.emplace(name.substr(6), std::move(t));
    } else if (name.rfind("opt.v.", 0) == 0) {
      ck.adam.v.emplace(name.substr(6), std::move(t));
    } else {
      if (!groups.contains(name)) {
        throw CheckpointError(ErrorKind::checkpoint_shape, "checkpoint tensor '" + name + "' has no group");
      }
      ck.params.add(name, groups.at(name).get<std::string>(), std::move(t));
    }
  }
  if (!r.done()) throw CheckpointError(ErrorKind::checkpoint_truncated, "trailing bytes after the last tensor");
  for (const auto& [name, t] : meta.at("adam_steps").items()) ck.adam.t[name] = t.get<std::uint64_t>();
  for (const auto& g : meta.at("frozen")) ck.params.freeze(g.get<std::string>());
  return ck;
}

// Every tensor of `expected` must exist in `ck` with the same shape, and
// nothing else may.
inline void check_checkpoint_shapes(const Checkpoint& ck, const ParamStore<double>& expected) {
  for (const auto& name : expected.names()) {
    if (!ck.params.contains(name)) {
      throw CheckpointError(ErrorKind::checkpoint_shape, "checkpoint lacks tensor '" + name + "'");
    }
    if (ck.params.get(name).shape() != expected.get(name).shape()) {
      throw CheckpointError(ErrorKind::checkpoint_shape,
                            detail::concat("tensor '", name, "' has shape ",
                                           detail::shape_string(ck.params.get(name).shape()), ", model expects ",
                                           detail::shape_string(expected.get(name).shape())));
    }
  }
  if (ck.params.size() != expected.size()) {
    throw CheckpointError(ErrorKind::checkpoint_shape, "checkpoint has tensors the model does not define");
  }
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const TrainState<T>& state, json extra = json::object()) {
  io::write_file(path, encode_checkpoint(state, std::move(extra)));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig& model) {
  Checkpoint ck = load_checkpoint(path);
  check_checkpoint_shapes(ck, init_params(model, 0));
  return ck;
}

template <std::floating_point T>
TrainState<T> state_from_checkpoint(const Checkpoint& ck) {
  return TrainState<T>{ck.params.template cast<T>(), ck.adam.template cast<T>(), ck.step};
}

}  // namespace cbt
