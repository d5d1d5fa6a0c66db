#pragma once

#include <string>
#include <vector>

#include "cbt/io.hpp"
#include "cbt/model.hpp"
#include "cbt/probes.hpp"
#include "cbt/synthdata.hpp"
#include "cbt/trainer.hpp"

namespace cbt {

// One run: corpus, model, training schedule and the probes to evaluate.
// Every section and field is optional in the file; missing ones take
// their defaults, unknown ones are rejected.
struct RunConfig {
  CorpusSpec corpus;
  ModelConfig model;
  TrainConfig train;
  std::vector<ProbeConfig> probes{ProbeConfig{}};

  void validate() const {
    corpus.validate();
    model.validate();
    train.validate();
    for (const auto& p : probes) p.validate();
    if (corpus.feature_dim != model.encoder.input_dim) {
      throw ConfigError(detail::concat("corpus.feature_dim ", corpus.feature_dim, " differs from model.encoder.input_dim ",
                                       model.encoder.input_dim));
    }
    if (corpus.vocab != model.vocab) {
      throw ConfigError(detail::concat("corpus.vocab ", corpus.vocab, " differs from model.vocab ", model.vocab));
    }
    if (corpus.seq_len > model.visual.max_positions || corpus.seq_len > model.text.max_positions) {
      throw ConfigError("corpus.seq_len exceeds the transformers' max_positions");
    }
    if (2 * corpus.seq_len + 1 > model.cross.max_positions && train.weights.cross > 0.0) {
      throw ConfigError("model.cross.max_positions is too small for two streams of corpus.seq_len");
    }
  }
};

inline void to_json(json& j, const RunConfig& c) {
  json probes = json::array();
  for (const auto& p : c.probes) probes.push_back(json(p));
  j = json{{"corpus", json(c.corpus)}, {"model", json(c.model)}, {"train", json(c.train)}, {"probe", probes}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  if (const json* s = o.child("corpus")) c.corpus = corpus_spec_from_json(*s, "corpus");
  if (const json* s = o.child("model")) c.model = model_config_from_json(*s, "model");
  if (const json* s = o.child("train")) c.train = train_config_from_json(*s, "train");
  if (const json* s = o.child("probe")) {
    c.probes.clear();
    if (s->is_array()) {
      for (std::size_t i = 0; i < s->size(); ++i)
        c.probes.push_back(probe_config_from_json((*s)[i], detail::concat("probe[", i, "]")));
    } else {
      c.probes.push_back(probe_config_from_json(*s, "probe"));
    }
  }
  o.finish();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(io::parse_json(io::read_file(path), path));
}

// The fully resolved document written beside every run's outputs.
inline json resolved_echo(const RunConfig& c, const std::string& command) {
  json j = c;
  j["artifact_version"] = kArtifactVersion;
  j["command"] = command;
  return j;
}

}  // namespace cbt
