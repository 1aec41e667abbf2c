#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "depthlab/container.hpp"
#include "depthlab/data.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/experiment.hpp"
#include "depthlab/metrics.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/pipeline.hpp"
#include "depthlab/plot_data.hpp"
#include "depthlab/recovery.hpp"
#include "depthlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace depthlab;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 0;
  std::string log_level = "info";
};

std::string sha256_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

// Digests every regular file under `path` (sorted), or the file itself.
void add_digests(json& out, const fs::path& path) {
  if (path.empty() || !fs::exists(path)) return;
  if (fs::is_regular_file(path)) {
    out[path.string()] = sha256_file(path);
    return;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out[f.string()] = sha256_file(f);
}

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      json j = json::object();
      for (const auto& kv : node) j[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return j;
    }
    case YAML::NodeType::Sequence: {
      json j = json::array();
      for (const auto& item : node) j.push_back(yaml_to_json(item));
      return j;
    }
    case YAML::NodeType::Scalar: {
      const auto text = node.Scalar();
      if (node.Tag() == "!") return text;
      if (text == "true" || text == "false") return text == "true";
      try {
        std::size_t used = 0;
        const long long i = std::stoll(text, &used);
        if (used == text.size()) return i;
        const double d = std::stod(text, &used);
        if (used == text.size()) return d;
      } catch (const std::exception&) {
      }
      return text;
    }
    default:
      return nullptr;
  }
}

fs::path manifest_dir(const fs::path& out) {
  if (out.has_extension()) return out.parent_path().empty() ? fs::path(".") : out.parent_path();
  return out;
}

void write_manifest(const fs::path& out, const std::string& command, const Globals& g, const json& resolved,
                    const std::vector<fs::path>& inputs) {
  json digests = json::object();
  for (const auto& p : inputs) add_digests(digests, p);
  const json manifest = {{"command", command},
                         {"version", version_string()},
                         {"precedence", "defaults < config file < command-line flags"},
                         {"seed", g.seed.value_or(0)},
                         {"config_file", g.config},
                         {"resolved", resolved},
                         {"inputs", digests}};
  const auto dir = manifest_dir(out);
  fs::create_directories(dir);
  write_file_atomic(dir / "run_manifest.json", manifest.dump(2) + "\n");
}

PackedDataset load_data(const std::string& data, const std::string& corpus, const std::string& layout,
                        std::size_t synthetic_docs, std::size_t seq_len, std::uint64_t seed) {
  const int sources = (data.empty() ? 0 : 1) + (corpus.empty() ? 0 : 1) + (synthetic_docs > 0 ? 1 : 0);
  if (sources != 1) throw UsageError("give exactly one of --data, --corpus, --synthetic-docs");
  if (!data.empty()) return load_dataset(data);
  std::vector<std::string> docs;
  if (!corpus.empty()) {
    docs = load_corpus(corpus, layout == "blank_line" ? CorpusLayout::BlankLineSeparated : CorpusLayout::Directory);
  } else {
    SyntheticCorpusSpec spec;
    spec.n_docs = synthetic_docs;
    docs = synthetic_corpus(spec, seed);
  }
  return pack_texts(docs, seq_len, seed);
}

struct TaskFlags {
  std::string rule;
  std::size_t items = 64;
  std::size_t shots = 5;

  void add(CLI::App* app) {
    app->add_option("--task", rule, "Multiple-choice task rule (copy|flip)")->check(CLI::IsMember({"copy", "flip"}));
    app->add_option("--task-items", items, "Task items");
    app->add_option("--task-shots", shots, "Exemplars per prompt");
  }
  std::optional<McTask> make(std::uint64_t seed) const {
    if (rule.empty()) return std::nullopt;
    McTaskSpec spec;
    spec.rule = parse_mc_rule(rule);
    return gen_mc_task(spec, items, shots, seed);
  }
};

json eval_json(const EvalReport& r) {
  json j = {{"mean_nll", r.mean_nll}, {"perplexity", r.perplexity}, {"n_tokens", r.n_tokens}};
  if (r.mc_accuracy) j["mc_accuracy"] = *r.mc_accuracy;
  if (r.n_items) j["n_items"] = *r.n_items;
  return j;
}

std::vector<UnitId> parse_units(const std::string& list) {
  std::vector<UnitId> units;
  std::size_t pos = 0;
  while (pos < list.size()) {
    const auto comma = list.find(',', pos);
    const auto item = list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!item.empty()) units.push_back(parse_unit(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return units;
}

ExperimentConfig experiment_from(const Globals& g) {
  if (g.config.empty()) throw UsageError("--config is required");
  ExperimentConfig c;
  try {
    c = load_experiment_config(g.config);
  } catch (const InputError& e) {
    throw UsageError(e.what());
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.output_dir = g.out;
  if (g.threads > 0) c.threads = g.threads;
  return c;
}

std::vector<fs::path> experiment_inputs(const Globals& g, const ExperimentConfig& c) {
  std::vector<fs::path> inputs{g.config, c.checkpoint, c.dataset, c.corpus};
  for (const auto& s : c.evolution_snapshots) inputs.push_back(s);
  return inputs;
}

int run_experiment_command(const std::string& name, const Globals& g, bool with_evolution) {
  auto c = experiment_from(g);
  if (!with_evolution) c.evolution_snapshots.clear();
  run_experiment(c);
  write_manifest(c.output_dir, name, g, to_json(c), experiment_inputs(g, c));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depthlab: layer-influence metrics, pruning sweeps and recovery for toy transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "YAML configuration file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Seed (overrides the config file)");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--threads", g.threads, "Worker threads (default: available parallelism)");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  // train-toy
  auto* train = app.add_subcommand("train-toy", "Train the toy model and write snapshots");
  std::string t_data, t_corpus, t_layout = "directory";
  std::size_t t_synth = 0, t_seq = 128;
  TrainConfig tc;
  std::optional<std::size_t> t_steps, t_batch, t_dim, t_blocks, t_heads, t_ffn, t_max_seq, t_warmup, t_snap;
  std::optional<double> t_peak, t_min;
  train->add_option("--data", t_data, "Packed dataset (.prld)");
  train->add_option("--corpus", t_corpus, "Corpus directory or file");
  train->add_option("--layout", t_layout)->check(CLI::IsMember({"directory", "blank_line"}));
  train->add_option("--synthetic-docs", t_synth, "Generate this many synthetic documents");
  train->add_option("--seq-len", t_seq);
  train->add_option("--steps", t_steps);
  train->add_option("--batch", t_batch);
  train->add_option("--dim", t_dim);
  train->add_option("--blocks", t_blocks);
  train->add_option("--heads", t_heads);
  train->add_option("--ffn-hidden", t_ffn);
  train->add_option("--max-seq-len", t_max_seq);
  train->add_option("--warmup", t_warmup);
  train->add_option("--peak-lr", t_peak);
  train->add_option("--min-lr", t_min);
  train->add_option("--snapshot-every", t_snap);

  // pack-data
  auto* packcmd = app.add_subcommand("pack-data", "Tokenize and pack a corpus into a .prld dataset");
  std::string p_corpus, p_layout = "directory";
  std::size_t p_synth = 0, p_seq = 128;
  std::optional<double> p_split;
  packcmd->add_option("--corpus", p_corpus);
  packcmd->add_option("--layout", p_layout)->check(CLI::IsMember({"directory", "blank_line"}));
  packcmd->add_option("--synthetic-docs", p_synth);
  packcmd->add_option("--seq-len", p_seq);
  packcmd->add_option("--split", p_split, "Also write <out>.calib.prld and <out>.val.prld with this calibration fraction");

  // influence
  auto* infl = app.add_subcommand("influence", "Score units with one influence metric");
  std::string i_ckpt, i_data, i_metric = "cosine", i_gran = "block", i_est = "leave_one_out";
  std::size_t i_perms = 64;
  AdapterConfig i_adapter;
  std::string i_objective = "mse_repr";
  TaskFlags i_task;
  infl->add_option("--checkpoint", i_ckpt)->required();
  infl->add_option("--data", i_data, "Calibration dataset (.prld)")->required();
  infl->add_option("--metric", i_metric);
  infl->add_option("--granularity", i_gran);
  infl->add_option("--estimator", i_est);
  infl->add_option("--permutations", i_perms);
  infl->add_option("--rank", i_adapter.rank);
  infl->add_option("--objective", i_objective);
  infl->add_option("--adapter-steps", i_adapter.steps);
  infl->add_option("--adapter-batch", i_adapter.effective_batch);
  i_task.add(infl);

  // sweep / report
  app.add_subcommand("sweep", "Run influence scoring and pruning sweeps from --config");
  app.add_subcommand("report", "Run the full experiment bundle from --config, including evolution and plot data");

  // fit-recovery
  auto* fit = app.add_subcommand("fit-recovery", "Fit emulated updates or adapters for the given units");
  std::string f_ckpt, f_data, f_kind = "emulated_update", f_units, f_objective = "mse_repr";
  AdapterConfig f_adapter;
  fit->add_option("--checkpoint", f_ckpt)->required();
  fit->add_option("--data", f_data, "Calibration dataset (.prld)")->required();
  fit->add_option("--kind", f_kind)->check(CLI::IsMember({"emulated_update", "adapter"}));
  fit->add_option("--units", f_units, "Comma-separated units, e.g. block3,attn5")->required();
  fit->add_option("--rank", f_adapter.rank);
  fit->add_option("--objective", f_objective);
  fit->add_option("--steps", f_adapter.steps);
  fit->add_option("--batch", f_adapter.effective_batch);
  fit->add_option("--lr", f_adapter.learning_rate);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a (possibly pruned) model");
  std::string e_ckpt, e_data, e_prune, e_recovery_file, e_recovery = "none";
  TaskFlags e_task;
  ev->add_option("--checkpoint", e_ckpt)->required();
  ev->add_option("--data", e_data, "Validation dataset (.prld)")->required();
  ev->add_option("--prune", e_prune, "Comma-separated units to remove");
  ev->add_option("--recovery", e_recovery)->check(CLI::IsMember({"none", "emulated_update", "adapter"}));
  ev->add_option("--recovery-file", e_recovery_file, "Bundle written by fit-recovery");
  e_task.add(ev);

  // evolution
  auto* evo = app.add_subcommand("evolution", "Influence of each unit across training snapshots");
  std::vector<std::string> v_snaps;
  std::string v_data, v_metric = "cosine", v_gran = "block";
  evo->add_option("--snapshots", v_snaps)->required();
  evo->add_option("--data", v_data)->required();
  evo->add_option("--metric", v_metric);
  evo->add_option("--granularity", v_gran);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return 2;
  }
  if (*seed_opt) g.seed = seed_value;
  spdlog::set_level(spdlog::level::from_str(g.log_level));
  set_num_threads(g.threads > 0 ? g.threads : std::max(1u, std::thread::hardware_concurrency()));
  const std::uint64_t seed = g.seed.value_or(0);
  const std::string command = app.get_subcommands().front()->get_name();
  std::string stage = command;

  try {
    if (command == "train-toy") {
      if (g.out.empty()) throw UsageError("--out <directory> is required");
      if (!g.config.empty()) {
        try {
          tc = train_config_from_json(yaml_to_json(YAML::LoadFile(g.config)));
        } catch (const YAML::Exception& e) {
          throw UsageError(std::string("config: ") + e.what());
        } catch (const json::exception& e) {
          throw UsageError(std::string("config: ") + e.what());
        }
      }
      if (g.seed) tc.seed = *g.seed;
      if (t_steps) tc.steps = *t_steps;
      if (t_batch) tc.batch = *t_batch;
      if (t_dim) tc.model.dim = *t_dim;
      if (t_blocks) tc.model.n_blocks = *t_blocks;
      if (t_heads) tc.model.n_heads = *t_heads;
      if (t_ffn) tc.model.ffn_hidden = *t_ffn;
      if (t_max_seq) tc.model.max_seq_len = *t_max_seq;
      if (t_warmup) tc.schedule.warmup_steps = *t_warmup;
      if (t_peak) tc.schedule.peak_lr = *t_peak;
      if (t_min) tc.schedule.min_lr = *t_min;
      if (t_snap) tc.snapshot_every = *t_snap;
      try {
        tc.validate();
      } catch (const ContractError& e) {
        throw UsageError(e.what());
      }
      stage = "load";
      const auto corpus = load_data(t_data, t_corpus, t_layout, t_synth, t_seq, tc.seed);
      stage = "train";
      const auto result = train_toy(tc, corpus, g.out, [&](std::size_t step, double loss, double lr) {
        if (step % 50 == 0 || step == tc.steps) spdlog::info("step {} loss {:.4f} lr {:.2e}", step, loss, lr);
      });
      json resolved = to_json(tc);
      resolved["data"] = {{"dataset", t_data}, {"corpus", t_corpus}, {"synthetic_docs", t_synth}, {"seq_len", t_seq}};
      write_manifest(g.out, command, g, resolved, {g.config, t_data, t_corpus});
    } else if (command == "pack-data") {
      if (g.out.empty()) throw UsageError("--out <file.prld> is required");
      if (p_split && !(*p_split > 0.0 && *p_split < 1.0)) throw UsageError("--split must lie in (0, 1)");
      stage = "load";
      const auto ds = load_data("", p_corpus, p_layout, p_synth, p_seq, seed);
      stage = "write";
      const fs::path out(g.out);
      if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
      save_dataset(ds, out);
      if (p_split) {
        const auto parts = split(ds, *p_split, seed);
        auto stem = out;
        stem.replace_extension();
        save_dataset(parts.calibration, stem.string() + ".calib.prld");
        save_dataset(parts.validation, stem.string() + ".val.prld");
      }
      json resolved = {{"corpus", p_corpus}, {"layout", p_layout}, {"synthetic_docs", p_synth},
                       {"seq_len", p_seq},   {"rows", ds.rows()},   {"documents", ds.doc_count}};
      if (p_split) resolved["split"] = *p_split;
      write_manifest(out, command, g, resolved, {p_corpus});
    } else if (command == "influence") {
      if (g.out.empty()) throw UsageError("--out <file.json> is required");
      MetricRequest req;
      try {
        req.metric = parse_metric(i_metric);
        req.granularity = parse_granularity(i_gran);
        req.shapley.estimator = parse_shapley_estimator(i_est);
        i_adapter.objective = parse_adapter_objective(i_objective);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      req.shapley.n_permutations = i_perms;
      req.shapley.seed = seed;
      stage = "load";
      const Model model = load_checkpoint(i_ckpt);
      const auto ds = load_dataset(i_data);
      const auto task = i_task.make(seed);
      if (req.metric == MetricId::ShapleyTaskLoss && !task) throw UsageError("shapley_task_loss needs --task");
      req.shapley.task = task ? &*task : nullptr;
      stage = "influence";
      InfluenceTable table;
      if (req.metric == MetricId::AdapterLoss) {
        i_adapter.seed = seed;
        const auto units = units_at(req.granularity, model.config.n_blocks);
        std::vector<AdapterParams> adapters(units.size());
        parallel_for(units.size(), [&](std::size_t i) { adapters[i] = train_adapter(model, ds, units[i], i_adapter); });
        table = adapter_loss_influence(adapters);
      } else {
        table = compute_influence(model, ds, req);
      }
      stage = "write";
      const fs::path out(g.out);
      if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
      write_influence_table(table, out);
      const json resolved = {{"checkpoint", i_ckpt},         {"data", i_data},
                             {"metric", i_metric},           {"granularity", i_gran},
                             {"estimator", i_est},           {"permutations", i_perms},
                             {"task", i_task.rule},          {"seed", seed}};
      write_manifest(out, command, g, resolved, {i_ckpt, i_data});
    } else if (command == "sweep" || command == "report") {
      stage = "experiment";
      return run_experiment_command(command, g, command == "report");
    } else if (command == "fit-recovery") {
      if (g.out.empty()) throw UsageError("--out <file.prlr> is required");
      std::vector<UnitId> units;
      try {
        units = parse_units(f_units);
        f_adapter.objective = parse_adapter_objective(f_objective);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      f_adapter.seed = seed;
      stage = "load";
      const Model model = load_checkpoint(f_ckpt);
      const auto ds = load_dataset(f_data);
      stage = "recovery";
      RecoveryBundle bundle;
      if (f_kind == "emulated_update") {
        bundle.updates = estimate_emulated_update(model, ds, units);
      } else {
        bundle.adapters.resize(units.size());
        parallel_for(units.size(), [&](std::size_t i) { bundle.adapters[i] = train_adapter(model, ds, units[i], f_adapter); });
      }
      stage = "write";
      const fs::path out(g.out);
      if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
      save_recovery(bundle, out);
      const json resolved = {{"checkpoint", f_ckpt}, {"data", f_data},           {"kind", f_kind},
                             {"units", f_units},     {"rank", f_adapter.rank},   {"objective", f_objective},
                             {"steps", f_adapter.steps}, {"batch", f_adapter.effective_batch}, {"seed", seed}};
      write_manifest(out, command, g, resolved, {f_ckpt, f_data});
    } else if (command == "eval") {
      if (g.out.empty()) throw UsageError("--out <file.json> is required");
      std::vector<UnitId> pruned;
      try {
        pruned = parse_units(e_prune);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const auto kind = parse_recovery_kind(e_recovery);
      if (kind != RecoveryKind::None && e_recovery_file.empty()) throw UsageError("--recovery needs --recovery-file");
      stage = "load";
      const Model model = load_checkpoint(e_ckpt);
      const auto ds = load_dataset(e_data);
      const RecoveryBundle bundle = e_recovery_file.empty() ? RecoveryBundle{} : load_recovery(e_recovery_file);
      const auto task = e_task.make(seed);
      stage = "eval";
      const auto plan = recovery_plan(model.config.n_blocks, pruned, kind, bundle);
      const auto report = evaluate(model, plan, ds, task ? &*task : nullptr);
      stage = "write";
      const fs::path out(g.out);
      if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
      write_file_atomic(out, eval_json(report).dump(2) + "\n");
      const json resolved = {{"checkpoint", e_ckpt}, {"data", e_data}, {"prune", e_prune},
                             {"recovery", e_recovery}, {"recovery_file", e_recovery_file},
                             {"task", e_task.rule}, {"seed", seed}};
      write_manifest(out, command, g, resolved, {e_ckpt, e_data, e_recovery_file});
    } else if (command == "evolution") {
      if (g.out.empty()) throw UsageError("--out <directory> is required");
      MetricRequest req;
      try {
        req.metric = parse_metric(v_metric);
        req.granularity = parse_granularity(v_gran);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      req.shapley.seed = seed;
      stage = "load";
      std::vector<Model> models;
      EvolutionSeries series;
      for (const auto& s : v_snaps) {
        CheckpointInfo info;
        models.push_back(load_checkpoint(s, &info));
        series.steps.push_back(info.step.value_or(models.size() - 1));
      }
      const auto ds = load_dataset(v_data);
      stage = "evolution";
      series.tables = influence_evolution(models, ds, req);
      stage = "write";
      fs::create_directories(g.out);
      json tables = json::array();
      for (std::size_t i = 0; i < series.tables.size(); ++i) {
        tables.push_back({{"step", series.steps[i]}, {"snapshot", v_snaps[i]}, {"table", to_json(series.tables[i])}});
      }
      write_file_atomic(fs::path(g.out) / "evolution.json", tables.dump(2) + "\n");
      std::string csv = "series,x,y,value\n";
      for (std::size_t i = 0; i < series.tables.size(); ++i) {
        for (const auto& s : series.tables[i].scores) {
          csv += to_string(s.unit) + "," + std::to_string(series.steps[i]) + "," + v_metric + "," +
                 format_number(s.score) + "\n";
        }
      }
      write_file_atomic(fs::path(g.out) / "plot_influence_evolution.csv", csv);
      std::vector<fs::path> inputs(v_snaps.begin(), v_snaps.end());
      inputs.push_back(v_data);
      const json resolved = {{"snapshots", v_snaps}, {"data", v_data}, {"metric", v_metric}, {"granularity", v_gran}};
      write_manifest(g.out, command, g, resolved, inputs);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.get_subcommand(command)->help();
    return 2;
  } catch (const PipelineError& e) {
    std::cerr << "error [" << command << "] " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error [" << command << ":" << stage << "]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
