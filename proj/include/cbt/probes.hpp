#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cbt/errors.hpp"
#include "cbt/io.hpp"
#include "cbt/model.hpp"
#include "cbt/synthdata.hpp"
#include "cbt/trainer.hpp"

namespace cbt {

enum class ProbeMode { frozen, finetuned };
enum class ProbeTask { seq_class, anticipation, dense_label };

inline std::string to_string(ProbeMode m) { return m == ProbeMode::frozen ? "frozen" : "fine-tuned"; }
inline std::string to_string(ProbeTask t) {
  switch (t) {
    case ProbeTask::seq_class: return "seq-class";
    case ProbeTask::anticipation: return "anticipation";
    case ProbeTask::dense_label: return "dense-label";
  }
  return "?";
}

inline ProbeMode parse_probe_mode(const std::string& s) {
  if (s == "frozen") return ProbeMode::frozen;
  if (s == "fine-tuned" || s == "finetuned") return ProbeMode::finetuned;
  throw ConfigError("probe mode must be \"frozen\" or \"fine-tuned\", got \"" + s + "\"");
}

inline ProbeTask parse_probe_task(const std::string& s) {
  if (s == "seq-class") return ProbeTask::seq_class;
  if (s == "anticipation") return ProbeTask::anticipation;
  if (s == "dense-label") return ProbeTask::dense_label;
  throw ConfigError("probe task must be seq-class, anticipation or dense-label, got \"" + s + "\"");
}

struct ProbeConfig {
  ProbeMode mode = ProbeMode::frozen;
  ProbeTask task = ProbeTask::seq_class;
  std::size_t observed_window = 0;  // 0: the whole sequence
  std::size_t epochs = 20;
  double learning_rate = 1e-2;      // head rate; encoder groups use a tenth of it
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  double test_fraction = 0.4;

  void validate() const {
    if (epochs == 0) throw ConfigError("probe.epochs must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("probe.learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("probe.batch_size must be positive");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("probe.test_fraction must lie in (0, 1)");
  }
};

inline void to_json(json& j, const ProbeConfig& c) {
  j = json{{"mode", to_string(c.mode)},   {"task", to_string(c.task)},
           {"observed_window", c.observed_window}, {"epochs", c.epochs},
           {"learning_rate", c.learning_rate},     {"batch_size", c.batch_size},
           {"seed", c.seed},                       {"test_fraction", c.test_fraction}};
}

inline ProbeConfig probe_config_from_json(const json& j, const std::string& where = "probe") {
  ProbeConfig c;
  StrictObject o(j, where);
  std::string mode = to_string(c.mode), task = to_string(c.task);
  o.get("mode", mode);
  o.get("task", task);
  c.mode = parse_probe_mode(mode);
  c.task = parse_probe_task(task);
  o.get("observed_window", c.observed_window);
  o.get("epochs", c.epochs);
  o.get("learning_rate", c.learning_rate);
  o.get("batch_size", c.batch_size);
  o.get("seed", c.seed);
  o.get("test_fraction", c.test_fraction);
  o.finish();
  return c;
}

struct ProbeReport {
  std::string method = "cbt";
  ProbeTask task = ProbeTask::seq_class;
  ProbeMode mode = ProbeMode::frozen;
  std::size_t window = 0;
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  std::vector<double> per_class_accuracy;  // NaN-free: classes absent from the test set report 0
  std::size_t num_examples = 0;            // test examples (positions for dense-label)
  std::uint64_t seed = 0;
};

inline void to_json(json& j, const ProbeReport& r) {
  j = json{{"method", r.method},
           {"task", to_string(r.task)},
           {"mode", to_string(r.mode)},
           {"window", r.window},
           {"accuracy", r.accuracy},
           {"train_accuracy", r.train_accuracy},
           {"per_class_accuracy", r.per_class_accuracy},
           {"num_examples", r.num_examples},
           {"seed", r.seed}};
}

// ---- feature readouts --------------------------------------------------------

// Mean over non-padded rows.
template <std::floating_point T>
Tensor<T> avgpool_features(const Tensor<T>& h, const PadMask& pad_mask) {
  if (pad_mask.size() != h.rows()) throw ShapeError("avgpool_features: pad mask length differs from rows");
  Tensor<T> out(Shape{h.cols()});
  std::size_t n = 0;
  for (std::size_t t = 0; t < h.rows(); ++t) {
    if (!pad_mask[t]) continue;
    ++n;
    for (std::size_t c = 0; c < h.cols(); ++c) out[c] += h(t, c);
  }
  if (n == 0) throw DataError("avgpool_features: every position is padded");
  for (auto& v : out.data()) v /= T(n);
  return out;
}

inline std::size_t last_real_position(const PadMask& pad_mask) {
  for (std::size_t t = pad_mask.size(); t-- > 0;)
    if (pad_mask[t]) return t;
  throw DataError("anticipation_feature: every position is padded");
}

// Row at the last non-padded position.
template <std::floating_point T>
Tensor<T> anticipation_feature(const Tensor<T>& h, const PadMask& pad_mask) {
  if (pad_mask.size() != h.rows()) throw ShapeError("anticipation_feature: pad mask length differs from rows");
  const std::size_t t = last_real_position(pad_mask);
  Tensor<T> out(Shape{h.cols()});
  for (std::size_t c = 0; c < h.cols(); ++c) out[c] = h(t, c);
  return out;
}

// The last `window` real frames, moved to the front and right-padded to
// `window` rows. window >= real length keeps the sequence's real frames.
inline FeatureSequence observe_window(const FeatureSequence& x, std::size_t window) {
  if (window == 0) throw ConfigError("observation window must be positive");
  const std::size_t real = x.real_length();
  const std::size_t keep = std::min(window, real);
  const std::size_t rows = std::min(window, x.length());
  Tensor<double> v(Shape{rows, x.dim()});
  for (std::size_t t = 0; t < keep; ++t)
    for (std::size_t c = 0; c < x.dim(); ++c) v(t, c) = x.values(real - keep + t, c);
  return FeatureSequence::padded(std::move(v), keep);
}

// Labels of one sequence for a task (one per real position for dense-label).
inline std::vector<std::int64_t> probe_labels(const LabeledSequence& s, ProbeTask task) {
  switch (task) {
    case ProbeTask::seq_class: return {s.seq_label};
    case ProbeTask::anticipation: return {s.next_label};
    case ProbeTask::dense_label: {
      std::vector<std::int64_t> out;
      for (std::size_t t = 0; t < s.latents.size() && s.x.pad_mask[t]; ++t) out.push_back(s.latents[t]);
      return out;
    }
  }
  return {};
}

// Readout rows of a contextual sequence for a task.
template <std::floating_point T>
std::vector<Tensor<T>> readout(const Tensor<T>& h, const PadMask& pad, ProbeTask task) {
  switch (task) {
    case ProbeTask::seq_class: return {avgpool_features(h, pad)};
    case ProbeTask::anticipation: return {anticipation_feature(h, pad)};
    case ProbeTask::dense_label: {
      std::vector<Tensor<T>> rows;
      for (std::size_t t = 0; t < h.rows() && pad[t]; ++t) {
        Tensor<T> r(Shape{h.cols()});
        for (std::size_t c = 0; c < h.cols(); ++c) r[c] = h(t, c);
        rows.push_back(std::move(r));
      }
      return rows;
    }
  }
  return {};
}

// ---- linear softmax head ---------------------------------------------------------

struct LabeledMatrix {
  Tensor<double> x;  // n x d
  std::vector<std::int64_t> y;
};

// Per-column affine map to zero mean / unit variance, fitted on training rows.
struct Standardizer {
  std::vector<double> mean, inv_std;

  static Standardizer fit(const Tensor<double>& x) {
    Standardizer s;
    const std::size_t n = x.rows(), d = x.cols();
    s.mean.assign(d, 0.0);
    s.inv_std.assign(d, 1.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) s.mean[c] += x(i, c) / double(n);
    for (std::size_t c = 0; c < d; ++c) {
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (x(i, c) - s.mean[c]) * (x(i, c) - s.mean[c]) / double(n);
      s.inv_std[c] = 1.0 / std::sqrt(var + 1e-12);
    }
    return s;
  }

  Tensor<double> apply(Tensor<double> x) const {
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) x(i, c) = (x(i, c) - mean[c]) * inv_std[c];
    return x;
  }
};

struct LinearHead {
  Tensor<double> w;  // d x C
  Tensor<double> b;  // C

  LinearHead(std::size_t d, std::size_t classes) : w(Shape{d, classes}), b(Shape{classes}) {}

  std::int64_t predict(std::span<const double> row) const {
    const std::size_t c = b.size();
    std::int64_t arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < row.size(); ++j) s += row[j] * w(j, k);
      if (s > best) {
        best = s;
        arg = static_cast<std::int64_t>(k);
      }
    }
    return arg;
  }
};

namespace detail {

inline void check_labels(const std::vector<std::int64_t>& y, std::size_t classes) {
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= classes) {
      throw DataError(concat("probe label ", y[i], " at example ", i, " lies outside [0, ", classes, ")"));
    }
  }
}

// Mean softmax cross-entropy of logits against labels.
template <std::floating_point T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::int64_t>& labels) {
  std::vector<std::size_t> y(labels.begin(), labels.end());
  std::vector<std::uint8_t> all(logits.rows() * logits.cols(), 1);
  return mean(sub(masked_row_logsumexp(logits, std::move(all)), pick(logits, std::move(y))));
}

inline Tensor<double> gather(const Tensor<double>& x, std::span<const std::size_t> rows) {
  Tensor<double> out(Shape{rows.size(), x.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(rows[r], c);
  return out;
}

}  // namespace detail

// Minibatch Adam on softmax cross-entropy, from a zero head.
inline LinearHead train_linear_head(const LabeledMatrix& data, std::size_t classes, const ProbeConfig& cfg) {
  detail::check_labels(data.y, classes);
  const std::size_t n = data.x.rows(), d = data.x.cols();
  if (n == 0) throw DataError("probe training set is empty");
  LinearHead head(d, classes);
  ParamStore<double> store;
  store.add("head.w", group::head, head.w);
  store.add("head.b", group::head, head.b);
  AdamState<double> adam;
  const TrainConfig opt;
  Rng rng = Rng::derive(cfg.seed, 5);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      std::vector<std::int64_t> y;
      for (std::size_t r : rows) y.push_back(data.y[r]);
      Graph<double> g;
      Binding<double> p(g, store);
      auto x = g.constant(detail::gather(data.x, rows));
      auto loss = detail::cross_entropy(add_row(matmul(x, p("head.w")), p("head.b")), y);
      auto grads = p.gradients(g.backward(loss));
      const double lr = cfg.learning_rate * (1.0 - double(step) / double(total));
      adam_update(store, adam, grads, opt, lr);
      ++step;
    }
  }
  head.w = store.get("head.w");
  head.b = store.get("head.b");
  return head;
}

// Accuracy (and per-class accuracy) of a head on labelled rows.
inline std::pair<double, std::vector<double>> head_accuracy(const LinearHead& head, const LabeledMatrix& data,
                                                           std::size_t classes) {
  std::vector<std::size_t> hit(classes, 0), count(classes, 0);
  std::size_t total_hit = 0;
  for (std::size_t i = 0; i < data.x.rows(); ++i) {
    const auto y = static_cast<std::size_t>(data.y[i]);
    ++count[y];
    if (head.predict(data.x.row(i)) == data.y[i]) {
      ++hit[y];
      ++total_hit;
    }
  }
  std::vector<double> per(classes, 0.0);
  for (std::size_t k = 0; k < classes; ++k) per[k] = count[k] ? double(hit[k]) / double(count[k]) : 0.0;
  return {data.x.rows() ? double(total_hit) / double(data.x.rows()) : 0.0, per};
}

// ---- probe pipelines ----------------------------------------------------------------

namespace detail {

inline LabeledMatrix stack(std::vector<Tensor<double>>& rows, std::vector<std::int64_t>& labels) {
  if (rows.empty()) throw DataError("probe split is empty");
  const std::size_t d = rows[0].size();
  LabeledMatrix m{Tensor<double>(Shape{rows.size(), d}), std::move(labels)};
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) m.x(i, c) = rows[i][c];
  return m;
}

// Features of a split: contextual outputs (method "cbt") or raw frames
// averaged over the window (method "avgpool").
inline LabeledMatrix split_features(const Corpus& corpus, Split split, const ModelConfig* model,
                                    const ParamStore<double>* params, ProbeTask task, std::size_t window) {
  std::vector<Tensor<double>> rows;
  std::vector<std::int64_t> labels;
  for (std::size_t i = split.begin; i < split.end; ++i) {
    const auto& s = corpus.sequences[i];
    const FeatureSequence x = window ? observe_window(s.x, window) : s.x;
    auto ys = probe_labels(s, task);
    std::vector<Tensor<double>> feats;
    if (params) {
      feats = readout(visual_features(x, *model, *params), x.pad_mask, task);
    } else if (task == ProbeTask::dense_label) {
      feats = readout(x.values, x.pad_mask, task);
    } else {
      feats = {avgpool_features(x.values, x.pad_mask)};
    }
    if (task == ProbeTask::dense_label && window) {
      // Dense labels follow the observed frames.
      const std::size_t real = s.x.real_length();
      ys.erase(ys.begin(), ys.begin() + static_cast<std::ptrdiff_t>(real - x.real_length()));
    }
    for (auto& f : feats) rows.push_back(std::move(f));
    labels.insert(labels.end(), ys.begin(), ys.end());
  }
  return stack(rows, labels);
}

}  // namespace detail

struct ProbeOutcome {
  ProbeReport report;
  LinearHead head{1, 1};
  std::optional<ParamStore<double>> finetuned;  // updated encoder (fine-tuned mode only)
};

inline void finish_report(ProbeReport& r, const LinearHead& head, const LabeledMatrix& train,
                          const LabeledMatrix& test, std::size_t classes) {
  auto [acc, per] = head_accuracy(head, test, classes);
  r.accuracy = acc;
  r.per_class_accuracy = per;
  r.train_accuracy = head_accuracy(head, train, classes).first;
  r.num_examples = test.x.rows();
}

// AvgPool baseline: average of the raw input frames over the window.
inline ProbeReport avgpool_baseline(const Corpus& corpus, ProbeConfig cfg) {
  cfg.validate();
  const auto [train, test] = train_test_split(corpus.sequences.size(), cfg.test_fraction);
  const std::size_t classes = corpus.spec.num_classes;
  auto tr = detail::split_features(corpus, train, nullptr, nullptr, cfg.task, cfg.observed_window);
  auto te = detail::split_features(corpus, test, nullptr, nullptr, cfg.task, cfg.observed_window);
  const auto z = Standardizer::fit(tr.x);
  tr.x = z.apply(std::move(tr.x));
  te.x = z.apply(std::move(te.x));
  const auto head = train_linear_head(tr, classes, cfg);
  ProbeReport r;
  r.method = "avgpool";
  r.task = cfg.task;
  r.mode = ProbeMode::frozen;
  r.window = cfg.observed_window ? cfg.observed_window : corpus.spec.seq_len;
  r.seed = cfg.seed;
  finish_report(r, head, tr, te, classes);
  return r;
}

namespace detail {

// Fine-tuning: visual encoder and transformer train jointly with the head
// (encoder rate = head rate / 10); text and cross-modal parameters are not used.
inline ProbeOutcome finetune_probe(const Corpus& corpus, const ModelConfig& model, const ParamStore<double>& params,
                                   const ProbeConfig& cfg, Split train, Split test, const Standardizer& z) {
  const std::size_t classes = corpus.spec.num_classes;
  ParamStore<double> store;
  for (const auto& name : params.names()) {
    const auto& g = params.group_of(name);
    if (g == group::visual_encoder || g == group::visual_transformer) store.add(name, g, params.get(name));
  }
  const std::size_t d = model.visual.hidden;
  store.add("head.w", group::head, Tensor<double>(Shape{d, classes}));
  store.add("head.b", group::head, Tensor<double>(Shape{classes}));
  Tensor<double> shift(Shape{d}), inv(Shape{d});
  for (std::size_t c = 0; c < d; ++c) {
    shift[c] = -z.mean[c];
    inv[c] = z.inv_std[c];
  }
  AdamState<double> adam;
  const TrainConfig opt;
  Rng rng = Rng::derive(cfg.seed, 6);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = train.begin + i;
  const std::size_t per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Graph<double> g;
      Binding<double> p(g, store);
      std::vector<Var<double>> feats;
      std::vector<std::int64_t> labels;
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = corpus.sequences[order[k]];
        const FeatureSequence x = cfg.observed_window ? observe_window(s.x, cfg.observed_window) : s.x;
        auto h = visual_forward(x, MaskPattern{{}, x.length()}, model, p).context;
        switch (cfg.task) {
          case ProbeTask::seq_class: {
            std::vector<std::size_t> real;
            for (std::size_t t = 0; t < x.length() && x.pad_mask[t]; ++t) real.push_back(t);
            const double w = 1.0 / double(real.size());
            feats.push_back(matmul(g.constant(Tensor<double>(Shape{1, real.size()}, w)), gather_rows(h, real)));
            break;
          }
          case ProbeTask::anticipation:
            feats.push_back(gather_rows(h, {last_real_position(x.pad_mask)}));
            break;
          case ProbeTask::dense_label: {
            std::vector<std::size_t> real;
            for (std::size_t t = 0; t < x.length() && x.pad_mask[t]; ++t) real.push_back(t);
            feats.push_back(gather_rows(h, real));
            break;
          }
        }
        auto ys = probe_labels(s, cfg.task);
        if (cfg.task == ProbeTask::dense_label && cfg.observed_window) {
          ys.erase(ys.begin(), ys.begin() + static_cast<std::ptrdiff_t>(s.x.real_length() - x.real_length()));
        }
        labels.insert(labels.end(), ys.begin(), ys.end());
      }
      check_labels(labels, classes);
      auto f = concat_rows(std::span<const Var<double>>(feats));
      Tensor<double> scale_rows(f.shape());
      for (std::size_t r = 0; r < f.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) scale_rows(r, c) = inv[c];
      auto normed = mul(add_row(f, g.constant(shift)), g.constant(std::move(scale_rows)));
      auto logits = add_row(matmul(normed, p("head.w")), p("head.b"));
      auto grads = p.gradients(g.backward(cross_entropy(logits, labels)));
      const double lr = cfg.learning_rate * (1.0 - double(step) / double(total));
      std::map<std::string, Tensor<double>> head_grads, enc_grads;
      for (auto& [name, gr] : grads) {
        (store.group_of(name) == group::head ? head_grads : enc_grads).emplace(name, std::move(gr));
      }
      adam_update(store, adam, head_grads, opt, lr);
      adam_update(store, adam, enc_grads, opt, lr / 10.0);
      ++step;
    }
  }
  ParamStore<double> tuned = params;
  for (const auto& name : store.names())
    if (store.group_of(name) != group::head) tuned.set(name, store.get(name));
  ProbeOutcome out;
  out.head.w = store.get("head.w");
  out.head.b = store.get("head.b");
  // Evaluate with the tuned encoder and the same fixed standardization.
  auto tr = split_features(corpus, train, &model, &tuned, cfg.task, cfg.observed_window);
  auto te = split_features(corpus, test, &model, &tuned, cfg.task, cfg.observed_window);
  tr.x = z.apply(std::move(tr.x));
  te.x = z.apply(std::move(te.x));
  out.report.method = "cbt";
  out.report.task = cfg.task;
  out.report.mode = cfg.mode;
  out.report.window = cfg.observed_window ? cfg.observed_window : corpus.spec.seq_len;
  out.report.seed = cfg.seed;
  finish_report(out.report, out.head, tr, te, classes);
  out.finetuned = std::move(tuned);
  return out;
}

}  // namespace detail

// Linear probe on the visual stream's contextual outputs. Features are
// standardized with statistics of the training split under the initial
// encoder; frozen mode leaves `params` untouched.
inline ProbeOutcome train_probe(const Corpus& corpus, const ModelConfig& model, const ParamStore<double>& params,
                                ProbeConfig cfg) {
  cfg.validate();
  model.validate();
  if (corpus.spec.feature_dim != model.encoder.input_dim) {
    throw ConfigError(detail::concat("corpus feature_dim ", corpus.spec.feature_dim, " differs from encoder input ",
                                     model.encoder.input_dim));
  }
  const auto [train, test] = train_test_split(corpus.sequences.size(), cfg.test_fraction);
  const std::size_t classes = corpus.spec.num_classes;
  auto tr = detail::split_features(corpus, train, &model, &params, cfg.task, cfg.observed_window);
  const auto z = Standardizer::fit(tr.x);
  if (cfg.mode == ProbeMode::finetuned) return detail::finetune_probe(corpus, model, params, cfg, train, test, z);
  auto te = detail::split_features(corpus, test, &model, &params, cfg.task, cfg.observed_window);
  tr.x = z.apply(std::move(tr.x));
  te.x = z.apply(std::move(te.x));
  ProbeOutcome out;
  out.head = train_linear_head(tr, classes, cfg);
  out.report.method = "cbt";
  out.report.task = cfg.task;
  out.report.mode = cfg.mode;
  out.report.window = cfg.observed_window ? cfg.observed_window : corpus.spec.seq_len;
  out.report.seed = cfg.seed;
  finish_report(out.report, out.head, tr, te, classes);
  return out;
}

inline ProbeReport dense_label_probe(const Corpus& corpus, const ModelConfig& model, const ParamStore<double>& params,
                                     ProbeConfig cfg) {
  cfg.task = ProbeTask::dense_label;
  return train_probe(corpus, model, params, cfg).report;
}

// Anticipation probes for CBT features and the AvgPool baseline at each
// window, in the order given.
inline std::vector<ProbeReport> window_ablation(const Corpus& corpus, const ModelConfig& model,
                                                const ParamStore<double>& params, const std::vector<std::size_t>& windows,
                                                ProbeConfig cfg) {
  if (windows.empty()) throw ConfigError("window ablation needs at least one window");
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i] == 0) throw ConfigError("observation window must be positive");
    if (windows[i] > corpus.spec.seq_len) {
      throw ConfigError(detail::concat("window ", windows[i], " exceeds sequence length ", corpus.spec.seq_len));
    }
    if (i && windows[i] <= windows[i - 1]) throw ConfigError("windows must be strictly ascending");
  }
  cfg.task = ProbeTask::anticipation;
  std::vector<ProbeReport> out;
  for (std::size_t w : windows) {
    cfg.observed_window = w;
    out.push_back(train_probe(corpus, model, params, cfg).report);
  }
  for (std::size_t w : windows) {
    cfg.observed_window = w;
    out.push_back(avgpool_baseline(corpus, cfg));
  }
  return out;
}

inline std::string ablation_csv(const std::vector<ProbeReport>& reports) {
  std::ostringstream os;
  os << "method,window,accuracy,seed\n";
  for (const auto& r : reports) os << r.method << ',' << r.window << ',' << r.accuracy << ',' << r.seed << '\n';
  return os.str();
}

// ---- cross-modal retrieval ----------------------------------------------------------

// Fraction of slates where the true token stream scores highest. Test
// sequences are cut into consecutive slates of `slate` examples; example i
// of a slate is scored against every token stream of that slate.
inline double retrieval_accuracy(const Corpus& corpus, Split split, const ModelConfig& model,
                                 const ParamStore<double>& params, std::size_t slate = 16) {
  if (slate < 2) throw ConfigError("retrieval slate needs at least two candidates");
  std::size_t hit = 0, total = 0;
  for (std::size_t start = split.begin; start + slate <= split.end; start += slate) {
    Graph<double> g;
    Binding<double> p(g, params, true);
    std::vector<Stream<double>> xs, ys;
    for (std::size_t i = start; i < start + slate; ++i) {
      const auto& s = corpus.sequences[i];
      xs.push_back(Stream<double>{visual_forward(s.x, MaskPattern{{}, s.x.length()}, model, p).context, s.x.pad_mask});
      ys.push_back(Stream<double>{text_forward(s.y, MaskPattern{{}, s.y.ids.size()}, model, p), s.y.pad_mask});
    }
    auto scores = score_slate(std::span<const Stream<double>>(xs), std::span<const Stream<double>>(ys), model.cross, p)
                      .value();
    for (std::size_t i = 0; i < slate; ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < slate; ++j)
        if (scores(i, j) > scores(i, arg)) arg = j;
      hit += arg == i;
      ++total;
    }
  }
  if (total == 0) throw DataError("retrieval split is smaller than one slate");
  return double(hit) / double(total);
}

}  // namespace cbt
