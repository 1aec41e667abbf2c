#include "depthlab/experiment.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "depthlab/container.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/plot_data.hpp"
#include "depthlab/rng.hpp"

namespace depthlab {

std::string version_string() { return DEPTHLAB_VERSION; }

namespace {

void check_keys(const YAML::Node& node, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!node.IsMap()) throw InputError("config: '" + section + "' must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw InputError("config: unknown key '" + key + "' in " + section);
    }
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename U>
U get(const YAML::Node& node, const char* key, U fallback) {
  return node[key] ? node[key].as<U>() : fallback;
}

bool is_static(MetricId m) { return m == MetricId::Cosine || m == MetricId::RelL1 || m == MetricId::RelL2; }

bool is_shapley(MetricId m) {
  return m == MetricId::ShapleyLogitDist || m == MetricId::ShapleyLmLoss || m == MetricId::ShapleyTaskLoss;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (checkpoint.empty()) throw InputError("config: 'checkpoint' is required");
  const int sources = (dataset.empty() ? 0 : 1) + (corpus.empty() ? 0 : 1) + (synthetic_docs > 0 ? 1 : 0);
  if (sources != 1) throw InputError("config: data needs exactly one of dataset, corpus, synthetic_docs");
  if (!(calib_fraction > 0.0 && calib_fraction < 1.0)) throw InputError("config: calib_fraction must lie in (0, 1)");
  if (metrics.empty()) throw InputError("config: 'metrics' must list at least one metric");
  if (granularities.empty()) throw InputError("config: 'granularities' must not be empty");
  if (recoveries.empty()) throw InputError("config: 'recoveries' must not be empty");
  for (const auto& m : metrics) {
    if (m == "random") {
      if (iterative) throw InputError("config: iterative rescoring is undefined for the random ordering");
      continue;
    }
    MetricId id;
    try {
      id = parse_metric(m);
    } catch (const ContractError& e) {
      throw InputError(std::string("config: ") + e.what());
    }
    if (id == MetricId::ShapleyTaskLoss && !task) throw InputError("config: shapley_task_loss needs a 'task' section");
    if (id == MetricId::AdapterLoss && iterative) throw InputError("config: iterative rescoring is undefined for adapter_loss");
  }
  if (shapley_permutations < 1) throw InputError("config: shapley.permutations must be at least 1");
  if (adapter.rank < 1 || adapter.steps < 1 || adapter.effective_batch < 1) {
    throw InputError("config: adapter rank, steps and batch must be positive");
  }
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  try {
    const YAML::Node root = YAML::Load(text);
    if (!root || root.IsNull()) throw InputError("config: empty document");
    check_keys(root, "top level",
               {"seed", "threads", "checkpoint", "data", "task", "metrics", "granularities", "recoveries", "shapley",
                "adapter", "max_k", "iterative", "evolution", "output_dir"});
    c.seed = get<std::uint64_t>(root, "seed", 0);
    c.threads = get<std::size_t>(root, "threads", 0);
    if (root["checkpoint"]) c.checkpoint = resolve(base_dir, root["checkpoint"].as<std::string>());

    if (const auto d = root["data"]) {
      check_keys(d, "data",
                 {"dataset", "corpus", "layout", "synthetic_docs", "seq_len", "calib_fraction", "calibration_rows",
                  "validation_rows"});
      if (d["dataset"]) c.dataset = resolve(base_dir, d["dataset"].as<std::string>());
      if (d["corpus"]) c.corpus = resolve(base_dir, d["corpus"].as<std::string>());
      const auto layout = get<std::string>(d, "layout", "directory");
      if (layout == "directory") {
        c.corpus_layout = CorpusLayout::Directory;
      } else if (layout == "blank_line") {
        c.corpus_layout = CorpusLayout::BlankLineSeparated;
      } else {
        throw InputError("config: data.layout must be 'directory' or 'blank_line'");
      }
      c.synthetic_docs = get<std::size_t>(d, "synthetic_docs", 0);
      c.seq_len = get<std::size_t>(d, "seq_len", c.seq_len);
      c.calib_fraction = get<double>(d, "calib_fraction", c.calib_fraction);
      c.calibration_rows = get<std::size_t>(d, "calibration_rows", 0);
      c.validation_rows = get<std::size_t>(d, "validation_rows", 0);
    }

    if (const auto t = root["task"]) {
      check_keys(t, "task", {"rule", "n_items", "n_shots", "word_len", "n_options", "seed"});
      TaskSettings ts;
      ts.spec.rule = parse_mc_rule(get<std::string>(t, "rule", "copy"));
      ts.spec.word_len = get<std::size_t>(t, "word_len", ts.spec.word_len);
      ts.spec.n_options = get<std::size_t>(t, "n_options", ts.spec.n_options);
      ts.n_items = get<std::size_t>(t, "n_items", ts.n_items);
      ts.n_shots = get<std::size_t>(t, "n_shots", ts.n_shots);
      ts.seed = get<std::uint64_t>(t, "seed", c.seed);
      c.task = ts;
    }

    if (root["metrics"]) c.metrics = root["metrics"].as<std::vector<std::string>>();
    if (root["granularities"]) {
      c.granularities.clear();
      for (const auto& g : root["granularities"].as<std::vector<std::string>>()) c.granularities.push_back(parse_granularity(g));
    }

    if (const auto a = root["adapter"]) {
      check_keys(a, "adapter", {"rank", "objective", "steps", "batch", "lr", "seed"});
      c.adapter.rank = get<std::size_t>(a, "rank", c.adapter.rank);
      c.adapter.objective = parse_adapter_objective(get<std::string>(a, "objective", "mse_repr"));
      c.adapter.steps = get<std::size_t>(a, "steps", c.adapter.steps);
      c.adapter.effective_batch = get<std::size_t>(a, "batch", c.adapter.effective_batch);
      c.adapter.learning_rate = get<double>(a, "lr", 0.0);
      c.adapter.seed = get<std::uint64_t>(a, "seed", c.seed);
    } else {
      c.adapter.seed = c.seed;
    }
    if (root["recoveries"]) {
      c.recoveries.clear();
      for (const auto& r : root["recoveries"].as<std::vector<std::string>>()) {
        RecoverySpec spec;
        spec.kind = parse_recovery_kind(r);
        spec.adapter = c.adapter;
        c.recoveries.push_back(spec);
      }
    }

    if (const auto s = root["shapley"]) {
      check_keys(s, "shapley", {"estimator", "permutations"});
      c.shapley_estimator = parse_shapley_estimator(get<std::string>(s, "estimator", "leave_one_out"));
      c.shapley_permutations = get<std::size_t>(s, "permutations", c.shapley_permutations);
    }
    c.max_k = get<std::size_t>(root, "max_k", 0);
    c.iterative = get<bool>(root, "iterative", false);

    if (const auto e = root["evolution"]) {
      check_keys(e, "evolution", {"snapshots", "metric"});
      for (const auto& p : get<std::vector<std::string>>(e, "snapshots", {})) c.evolution_snapshots.push_back(resolve(base_dir, p));
      c.evolution_metric = get<std::string>(e, "metric", "cosine");
    }
    c.output_dir = resolve(base_dir, get<std::string>(root, "output_dir", "out"));
  } catch (const YAML::Exception& e) {
    throw InputError(std::string("config: ") + e.what());
  } catch (const ContractError& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw InputError(e.what());
  }
  return parse_experiment_config(text, path.parent_path());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json grans = nlohmann::json::array();
  for (auto g : c.granularities) grans.push_back(to_string(g));
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : c.recoveries) recs.push_back(r.label());
  nlohmann::json j = {
      {"seed", c.seed},
      {"threads", c.threads},
      {"checkpoint", c.checkpoint.string()},
      {"data",
       {{"dataset", c.dataset.string()},
        {"corpus", c.corpus.string()},
        {"layout", c.corpus_layout == CorpusLayout::Directory ? "directory" : "blank_line"},
        {"synthetic_docs", c.synthetic_docs},
        {"seq_len", c.seq_len},
        {"calib_fraction", c.calib_fraction},
        {"calibration_rows", c.calibration_rows},
        {"validation_rows", c.validation_rows}}},
      {"metrics", c.metrics},
      {"granularities", grans},
      {"recoveries", recs},
      {"shapley", {{"estimator", to_string(c.shapley_estimator)}, {"permutations", c.shapley_permutations}}},
      {"adapter",
       {{"rank", c.adapter.rank},
        {"objective", to_string(c.adapter.objective)},
        {"steps", c.adapter.steps},
        {"batch", c.adapter.effective_batch},
        {"lr", c.adapter.learning_rate > 0.0 ? c.adapter.learning_rate : default_adapter_lr(c.adapter.objective)},
        {"seed", c.adapter.seed}}},
      {"max_k", c.max_k},
      {"iterative", c.iterative},
      {"output_dir", c.output_dir.string()}};
  if (c.task) {
    j["task"] = {{"rule", to_string(c.task->spec.rule)}, {"n_items", c.task->n_items},
                 {"n_shots", c.task->n_shots},            {"word_len", c.task->spec.word_len},
                 {"n_options", c.task->spec.n_options},   {"seed", c.task->seed}};
  }
  if (!c.evolution_snapshots.empty()) {
    nlohmann::json snaps = nlohmann::json::array();
    for (const auto& p : c.evolution_snapshots) snaps.push_back(p.string());
    j["evolution"] = {{"snapshots", snaps}, {"metric", c.evolution_metric}};
  }
  return j;
}

namespace {

struct Run {
  const ExperimentConfig& cfg;
  ExperimentResult result;
  std::string stage = "config";
  nlohmann::json influence = nlohmann::json::object();
  nlohmann::json sweeps = nlohmann::json::array();

  void write(const std::string& name, const std::string& text) {
    const auto path = cfg.output_dir / name;
    write_file_atomic(path, text);
    result.files.push_back(path);
  }

  void write_report(const std::string& status, const std::string& error) {
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& f : result.files) artifacts.push_back(f.filename().string());
    nlohmann::json report = {{"status", status},
                             {"version", version_string()},
                             {"versions",
                              {{"depthlab", version_string()},
                               {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                                     std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                                     std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
                             {"config", to_json(cfg)},
                             {"artifacts", artifacts},
                             {"influence", influence},
                             {"sweeps", sweeps}};
    if (status != "complete") {
      report["failed_stage"] = stage;
      report["error"] = error;
    }
    std::filesystem::create_directories(cfg.output_dir);
    write_file_atomic(cfg.output_dir / "report.json", report.dump(2) + "\n");
  }
};

std::size_t granularity_salt(Granularity g) { return static_cast<std::size_t>(g) + 1; }

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  Run run{cfg, {}, "config"};
  try {
    cfg.validate();
    if (cfg.threads > 0) set_num_threads(cfg.threads);

    run.stage = "load";
    const Model model = load_checkpoint(cfg.checkpoint);
    PackedDataset packed;
    if (!cfg.dataset.empty()) {
      packed = load_dataset(cfg.dataset);
    } else {
      std::vector<std::string> docs;
      if (!cfg.corpus.empty()) {
        docs = load_corpus(cfg.corpus, cfg.corpus_layout);
      } else {
        SyntheticCorpusSpec spec;
        spec.n_docs = cfg.synthetic_docs;
        docs = synthetic_corpus(spec, cfg.seed);
      }
      packed = pack_texts(docs, cfg.seq_len, cfg.seed);
    }
    if (packed.seq_len() > model.config.max_seq_len) throw InputError("dataset rows are longer than max_seq_len");
    auto [calibration, validation] = split(packed, cfg.calib_fraction, cfg.seed);
    if (cfg.calibration_rows > 0 && cfg.calibration_rows < calibration.rows()) {
      calibration = calibration.slice(0, cfg.calibration_rows);
    }
    if (cfg.validation_rows > 0 && cfg.validation_rows < validation.rows()) {
      validation = validation.slice(0, cfg.validation_rows);
    }
    std::optional<McTask> task;
    if (cfg.task) task = gen_mc_task(cfg.task->spec, cfg.task->n_items, cfg.task->n_shots, cfg.task->seed);
    const McTask* task_ptr = task ? &*task : nullptr;

    run.stage = "guard";
    for (auto g : cfg.granularities) {
      const std::size_t n_units = units_at(g, model.config.n_blocks).size();
      if (cfg.max_k > n_units) {
        throw ContractError("max_k " + std::to_string(cfg.max_k) + " exceeds the " + std::to_string(n_units) +
                            " units at " + to_string(g) + " granularity");
      }
      const bool exhaustive = cfg.shapley_estimator == ShapleyEstimator::Exhaustive ||
                              cfg.shapley_estimator == ShapleyEstimator::ExhaustiveUniform;
      for (const auto& m : cfg.metrics) {
        if (m != "random" && is_shapley(parse_metric(m)) && exhaustive && n_units > kMaxExhaustiveUnits) {
          throw ResourceError("exhaustive Shapley over " + std::to_string(n_units) + " units at " + to_string(g) +
                              " granularity exceeds the limit of " + std::to_string(kMaxExhaustiveUnits));
        }
      }
    }
    std::filesystem::create_directories(cfg.output_dir);

    run.stage = "influence";
    ShapleyOptions shapley;
    shapley.estimator = cfg.shapley_estimator;
    shapley.n_permutations = cfg.shapley_permutations;
    shapley.seed = cfg.seed;
    shapley.task = task_ptr;

    std::map<std::pair<std::string, Granularity>, PruneOrder> orders;
    std::map<Granularity, RecoveryBundle> adapter_bundles;
    for (auto g : cfg.granularities) {
      std::optional<StaticScores> statics;
      for (const auto& m : cfg.metrics) {
        const std::string key = m + "_" + to_string(g);
        if (m == "random") {
          PruneOrder order;
          order.units = units_at(g, model.config.n_blocks);
          Rng rng = Rng::derive(cfg.seed, 0x7a0d0000 + granularity_salt(g));
          rng.shuffle(order.units);
          order.tie_break_rule = "uniform random permutation";
          orders[{m, g}] = order;
          continue;
        }
        const MetricId id = parse_metric(m);
        InfluenceTable table;
        if (is_static(id)) {
          if (!statics) statics = static_scores(model, calibration, g);
          table = static_table(*statics, id);
        } else if (id == MetricId::AdapterLoss) {
          const auto units = units_at(g, model.config.n_blocks);
          std::vector<AdapterParams> adapters(units.size());
          parallel_for(units.size(), [&](std::size_t i) {
            adapters[i] = train_adapter(model, calibration, units[i], cfg.adapter);
          });
          table = adapter_loss_influence(adapters);
          adapter_bundles[g].adapters = std::move(adapters);
        } else {
          MetricRequest req;
          req.metric = id;
          req.granularity = g;
          req.shapley = shapley;
          table = compute_influence(model, calibration, req);
        }
        run.write("influence_" + key + ".json", to_json(table).dump(2) + "\n");
        nlohmann::json norm = nlohmann::json::object();
        for (const auto& s : minmax_normalize(table).scores) norm[to_string(s.unit)] = s.score;
        run.influence[key] = norm;
        orders[{m, g}] = rank_units(table);
      }
    }

    run.stage = "recovery";
    std::map<std::pair<Granularity, std::string>, RecoveryBundle> bundles;
    for (auto g : cfg.granularities) {
      for (const auto& rec : cfg.recoveries) {
        if (rec.kind == RecoveryKind::None || cfg.iterative) continue;
        std::set<UnitId> needed;
        for (const auto& m : cfg.metrics) {
          const auto& order = orders.at({m, g});
          needed.insert(order.units.begin(), order.units.begin() + static_cast<std::ptrdiff_t>(cfg.max_k));
        }
        RecoveryBundle bundle;
        if (rec.kind == RecoveryKind::EmulatedUpdate) {
          const std::vector<UnitId> units(needed.begin(), needed.end());
          if (!units.empty()) bundle.updates = estimate_emulated_update(model, calibration, units);
        } else {
          const auto it = adapter_bundles.find(g);
          std::vector<UnitId> missing;
          for (const auto& u : needed) {
            if (it != adapter_bundles.end() && it->second.adapter_for(u)) {
              bundle.adapters.push_back(*it->second.adapter_for(u));
            } else {
              missing.push_back(u);
            }
          }
          std::vector<AdapterParams> fitted(missing.size());
          parallel_for(missing.size(), [&](std::size_t i) {
            fitted[i] = train_adapter(model, calibration, missing[i], rec.adapter);
          });
          for (auto& a : fitted) bundle.adapters.push_back(std::move(a));
        }
        bundles[{g, rec.label()}] = std::move(bundle);
      }
    }

    run.stage = "sweep";
    PlotInputs plots;
    std::map<std::tuple<std::string, Granularity, std::string>, std::vector<SweepRecord>> results;
    for (const auto& m : cfg.metrics) {
      for (auto g : cfg.granularities) {
        for (const auto& rec : cfg.recoveries) {
          SweepOptions opts;
          opts.max_k = cfg.max_k;
          opts.iterative = cfg.iterative;
          if (cfg.iterative) {
            opts.rescoring.metric = parse_metric(m);
            opts.rescoring.granularity = g;
            opts.rescoring.shapley = shapley;
          }
          const auto b = bundles.find({g, rec.label()});
          if (b != bundles.end()) opts.artifacts = &b->second;
          auto records = prune_sweep(model, orders.at({m, g}), rec, calibration, validation, task_ptr, opts);
          const std::string file = "sweep_" + m + "_" + to_string(g) + "_" + rec.label() + ".csv";
          run.write(file, sweep_csv(records));
          run.sweeps.push_back({{"metric", m},
                                {"granularity", to_string(g)},
                                {"recovery", rec.label()},
                                {"file", file},
                                {"baseline_mean_nll", records.front().eval.mean_nll}});
          plots.sweeps.push_back({m, g, records});
          results[{m, g, rec.label()}] = std::move(records);
        }
      }
    }

    run.stage = "report";
    const bool has_cosine = std::find(cfg.metrics.begin(), cfg.metrics.end(), "cosine") != cfg.metrics.end();
    if (has_cosine) {
      for (const auto& m : cfg.metrics) {
        if (m == "cosine") continue;
        for (auto g : cfg.granularities) {
          for (const auto& rec : cfg.recoveries) {
            plots.relative.push_back(
                {m, g, relative_report(results.at({m, g, rec.label()}), results.at({"cosine", g, rec.label()}))});
          }
        }
      }
    }
    const auto joint = static_scores(model, calibration, Granularity::JointSublayer);
    plots.update_norms = UpdateNormSeries{joint.units, joint.update_l2};
    if (!cfg.evolution_snapshots.empty()) {
      std::vector<Model> snaps;
      EvolutionSeries evo;
      for (const auto& p : cfg.evolution_snapshots) {
        CheckpointInfo info;
        snaps.push_back(load_checkpoint(p, &info));
        evo.steps.push_back(info.step.value_or(snaps.size() - 1));
      }
      MetricRequest req;
      req.metric = parse_metric(cfg.evolution_metric);
      req.shapley = shapley;
      evo.tables = influence_evolution(snaps, calibration, req);
      plots.evolution = std::move(evo);
    }
    for (const auto& [family, text] : plot_tables(plots)) run.write("plot_" + family + ".csv", text);

    run.write_report("complete", "");
    return run.result;
  } catch (const PipelineError& e) {
    run.stage = e.stage();
    run.write_report("incomplete", e.what());
    throw;
  } catch (const std::exception& e) {
    spdlog::error("experiment failed during {}: {}", run.stage, e.what());
    try {
      run.write_report("incomplete", e.what());
    } catch (const std::exception&) {
    }
    throw PipelineError(run.stage, e.what());
  }
}

}  // namespace depthlab
