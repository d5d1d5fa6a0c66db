// cbt: generate corpora, pretrain, probe and ablate from config files.
// stdout carries machine-readable results only; progress goes to stderr.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "cbt/config.hpp"

namespace fs = std::filesystem;
using namespace cbt;

namespace {

constexpr int kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitNumeric = 4, kExitOther = 1;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return kExitConfig;
    case ErrorKind::numeric: return kExitNumeric;
    default: return kExitData;
  }
}

// Relative output paths live under CBT_RUN_DIR when it is set.
fs::path run_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("CBT_RUN_DIR"); root && *root) return fs::path(root) / path;
  return path;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  io::write_file(p.string(), text);
}

std::vector<std::size_t> parse_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(what + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

struct Common {
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  bool dry_run = false;
};

void check_threads(const Common& c) {
  if (c.threads == 0) throw ConfigError("--threads must be positive");
  if (c.threads > 1) std::cerr << "note: runs are single-threaded; --threads " << c.threads << " is recorded only\n";
}

Corpus load_or_generate(const std::string& corpus_path, const CorpusSpec& spec) {
  if (!corpus_path.empty()) return read_corpus(corpus_path);
  std::cerr << "generating corpus of " << spec.num_sequences << " sequences\n";
  return generate(spec);
}

// ---- gen-data -----------------------------------------------------------------

int cmd_gen_data(const std::string& spec_path, const std::string& out, const Common& c) {
  check_threads(c);
  CorpusSpec spec;
  if (!spec_path.empty()) {
    const json j = io::parse_json(io::read_file(spec_path), spec_path);
    // Either a bare spec or a run config with a corpus section.
    spec = j.contains("corpus") ? run_config_from_json(j).corpus : corpus_spec_from_json(j, "corpus");
  }
  if (c.seed) spec.seed = *c.seed;
  spec.validate();
  const Corpus corpus = generate(spec);
  const std::string bytes = encode_corpus(corpus);
  const std::string checksum = io::hex64(io::fnv1a(bytes));
  if (!c.dry_run) write_text(run_path(out), bytes);
  std::cout << canonical(json{{"sequences", corpus.sequences.size()}, {"checksum", checksum}}) << "\n";
  return kExitOk;
}

// ---- pretrain -------------------------------------------------------------------

template <std::floating_point T>
int pretrain_as(const RunConfig& cfg, const Corpus& corpus, const fs::path& dir, const Common& c) {
  const json echo = resolved_echo(cfg, "pretrain");
  auto state = initial_state<T>(cfg.model, cfg.train);
  if (c.dry_run) {
    const Split train = corpus_split(corpus, cfg.train).first;
    const auto batch = sample_batch(corpus, train, cfg.train, 0, cfg.train.weights.bert > 0.0);
    const auto l = evaluate_loss(state.params, std::span<const StepExample>(batch), cfg.model, cfg.train.weights);
    std::cout << canonical(echo) << "\n";
    std::cout << canonical(to_json_record(StepRecord{0, l, cfg.train.learning_rate, 0.0})) << "\n";
    return kExitOk;
  }
  fs::create_directories(dir);
  write_text(dir / "config.json", canonical(echo) + "\n");
  const json meta{{"config", echo}, {"seed", cfg.train.seed}};
  std::string log;
  const auto flush_log = [&] { write_text(dir / "metrics.jsonl", log); };
  try {
    run_training<T>(state, corpus, cfg.model, cfg.train, [&](const StepRecord& r, const TrainState<T>& s) {
      log += canonical(to_json_record(r)) + "\n";
      if (r.step % 50 == 0 || r.step == cfg.train.total_steps()) {
        std::cerr << "step " << r.step << " l_total " << r.loss.total << "\n";
        flush_log();
      }
      if (cfg.train.checkpoint_every && r.step % cfg.train.checkpoint_every == 0 && r.step != cfg.train.total_steps()) {
        save_checkpoint((dir / detail::concat("checkpoint-", r.step, ".ckpt")).string(), s, meta);
      }
    });
  } catch (const NumericError& e) {
    flush_log();
    save_checkpoint((dir / "diagnostic.ckpt").string(), state, json{{"config", echo}, {"failure", e.component()}});
    throw;
  }
  flush_log();
  const fs::path ck = dir / "checkpoint.ckpt";
  save_checkpoint(ck.string(), state, meta);
  std::cout << canonical(json{{"checkpoint", ck.string()}, {"steps", state.step}}) << "\n";
  return kExitOk;
}

int cmd_pretrain(const std::string& config_path, const std::string& corpus_path, const std::string& out,
                 const Common& c) {
  check_threads(c);
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (c.seed) cfg.train.seed = *c.seed;
  Corpus corpus = load_or_generate(corpus_path, cfg.corpus);
  cfg.corpus = corpus.spec;
  cfg.validate();
  const fs::path dir = run_path(out);
  return cfg.train.precision == "f32" ? pretrain_as<float>(cfg, corpus, dir, c)
                                      : pretrain_as<double>(cfg, corpus, dir, c);
}

// ---- probe ------------------------------------------------------------------------

std::vector<ProbeConfig> load_probe_configs(const std::string& path) {
  if (path.empty()) return {ProbeConfig{}};
  const json j = io::parse_json(io::read_file(path), path);
  std::vector<ProbeConfig> out;
  if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(probe_config_from_json(j[i], detail::concat("probe[", i, "]")));
  } else if (j.contains("probe")) {
    out = run_config_from_json(j).probes;
  } else {
    out.push_back(probe_config_from_json(j));
  }
  return out;
}

int cmd_probe(const std::string& ck_path, const std::string& corpus_path, const std::string& probe_path,
              const std::string& task, const std::string& windows, bool baseline, const Common& c) {
  check_threads(c);
  Checkpoint ck = load_checkpoint(ck_path);
  ModelConfig model;
  if (ck.metadata.contains("config") && ck.metadata["config"].contains("model")) {
    model = model_config_from_json(ck.metadata["config"]["model"]);
  }
  check_checkpoint_shapes(ck, init_params(model, 0));
  auto probes = load_probe_configs(probe_path);
  for (auto& p : probes) {
    if (!task.empty()) p.task = parse_probe_task(task);
    if (c.seed) p.seed = *c.seed;
    p.validate();
  }
  CorpusSpec spec;
  if (corpus_path.empty() && ck.metadata.contains("config")) {
    spec = corpus_spec_from_json(ck.metadata["config"]["corpus"]);
  }
  const Corpus corpus = load_or_generate(corpus_path, spec);
  const fs::path beside = fs::path(ck_path).parent_path();

  if (!windows.empty()) {
    auto cfg = probes.front();
    const auto list = parse_list(windows, "--windows");
    auto reports = window_ablation(corpus, model, ck.params, list, cfg);
    if (!baseline) reports.resize(list.size());
    const std::string csv = ablation_csv(reports);
    if (!c.dry_run) write_text(beside / "ablation.csv", csv);
    std::cout << csv;
    return kExitOk;
  }
  json out = json::array();
  for (const auto& p : probes) {
    std::cerr << "probe " << to_string(p.task) << " (" << to_string(p.mode) << ")\n";
    out.push_back(json(train_probe(corpus, model, ck.params, p).report));
  }
  const json doc = out.size() == 1 ? out[0] : out;
  if (!c.dry_run) write_text(beside / "probe_report.json", canonical(doc) + "\n");
  std::cout << canonical(doc) << "\n";
  return kExitOk;
}

// ---- ablate ------------------------------------------------------------------------

struct GridAxis {
  std::string key;
  std::vector<std::size_t> values;
};

std::vector<GridAxis> parse_grid(const std::string& grid) {
  std::vector<GridAxis> axes;
  std::stringstream ss(grid);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("--grid: expected key=v1,v2 in '" + part + "'");
    GridAxis a{part.substr(0, eq), parse_list(part.substr(eq + 1), "--grid " + part.substr(0, eq))};
    if (a.key != "layers" && a.key != "heads") throw ConfigError("--grid: unknown key '" + a.key + "'");
    for (const auto& b : axes)
      if (b.key == a.key) throw ConfigError("--grid: duplicate key '" + a.key + "'");
    axes.push_back(std::move(a));
  }
  if (axes.empty()) throw ConfigError("--grid is empty");
  return axes;
}

int cmd_ablate(const std::string& grid, const std::string& config_path, const std::string& corpus_path,
               const std::string& out, const Common& c) {
  check_threads(c);
  RunConfig base = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (c.seed) {
    base.train.seed = *c.seed;
    for (auto& p : base.probes) p.seed = *c.seed;
  }
  const auto axes = parse_grid(grid);
  const Corpus corpus = load_or_generate(corpus_path, base.corpus);
  base.corpus = corpus.spec;
  base.validate();
  const ProbeConfig probe = base.probes.front();

  // Cartesian product, first axis slowest.
  std::vector<std::vector<std::size_t>> cells{{}};
  for (const auto& a : axes) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& cell : cells)
      for (std::size_t v : a.values) {
        auto x = cell;
        x.push_back(v);
        next.push_back(std::move(x));
      }
    cells = std::move(next);
  }
  std::string csv;
  for (const auto& a : axes) csv += a.key + ",";
  csv += "task,accuracy\n";
  if (c.dry_run) {
    std::cout << canonical(resolved_echo(base, "ablate")) << "\n" << csv;
    return kExitOk;
  }
  const fs::path dir = run_path(out);
  fs::create_directories(dir);
  write_text(dir / "config.json", canonical(resolved_echo(base, "ablate")) + "\n");
  std::cout << csv << std::flush;
  for (const auto& cell : cells) {
    std::string row;
    for (std::size_t v : cell) row += std::to_string(v) + ",";
    row += to_string(probe.task) + ",";
    try {
      RunConfig cfg = base;
      for (std::size_t k = 0; k < axes.size(); ++k) {
        auto& field = axes[k].key == "layers" ? cfg.model.visual.layers : cfg.model.visual.heads;
        field = cell[k];
      }
      cfg.validate();
      std::cerr << "cell " << row << "\n";
      auto state = initial_state<double>(cfg.model, cfg.train);
      run_training<double>(state, corpus, cfg.model, cfg.train);
      const double acc = train_probe(corpus, cfg.model, state.params, probe).report.accuracy;
      std::ostringstream num;
      num << acc;
      row += num.str();
    } catch (const Error& e) {
      std::cerr << "cell " << row << " failed: " << e.what() << "\n";
      row += "error";
    }
    csv += row + "\n";
    std::cout << row << "\n" << std::flush;
  }
  write_text(dir / "ablation.csv", csv);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked contrastive pretraining of a bidirectional transformer: data, pretraining and probes"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Override the run seed");
    sub->add_option("--threads", common.threads, "Worker threads (runs are single-threaded)");
    sub->add_flag("--dry-run", common.dry_run, "Resolve and report without writing anything");
  };

  std::string spec_path, out = "corpus.jsonl";
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("--spec", spec_path, "Corpus spec (JSON)");
  gen->add_option("--out", out, "Output corpus file");
  add_common(gen);

  std::string config_path, corpus_path, train_out = "pretrain";
  auto* pre = app.add_subcommand("pretrain", "Pretrain a model");
  pre->add_option("--config", config_path, "Run config (JSON)");
  pre->add_option("--corpus", corpus_path, "Corpus file (default: generate from the config)");
  pre->add_option("--out", train_out, "Output directory");
  add_common(pre);

  std::string ck_path, probe_path, task, windows;
  bool baseline = false;
  auto* probe = app.add_subcommand("probe", "Train and evaluate linear probes");
  probe->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
  probe->add_option("--corpus", corpus_path, "Corpus file (default: regenerate the pretraining corpus)");
  probe->add_option("--probe-config", probe_path, "Probe config (JSON object or list)");
  probe->add_option("--task", task, "Override the task: seq-class, anticipation or dense-label");
  probe->add_option("--windows", windows, "Observation windows, e.g. 12,24,48 (CSV output)");
  probe->add_flag("--baseline", baseline, "With --windows, also report the AvgPool baseline");
  add_common(probe);

  std::string grid, ablate_out = "ablate";
  auto* ablate = app.add_subcommand("ablate", "Pretrain and probe every cell of a layers/heads grid");
  ablate->add_option("--grid", grid, "e.g. \"layers=1,2;heads=1,2,4\"")->required();
  ablate->add_option("--config", config_path, "Run config (JSON)");
  ablate->add_option("--corpus", corpus_path, "Corpus file");
  ablate->add_option("--out", ablate_out, "Output directory");
  add_common(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  for (auto* sub : {gen, pre, probe, ablate})
    if (sub->parsed() && sub->count("--seed")) common.seed = seed;

  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out, common);
    if (pre->parsed()) return cmd_pretrain(config_path, corpus_path, train_out, common);
    if (probe->parsed()) return cmd_probe(ck_path, corpus_path, probe_path, task, windows, baseline, common);
    if (ablate->parsed()) return cmd_ablate(grid, config_path, corpus_path, ablate_out, common);
  } catch (const NumericError& e) {
    std::cerr << "error: numerical failure in " << e.component() << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
