#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/manifest.hpp"
#include "fedsim/partition.hpp"
#include "fedsim/protocol.hpp"
#include "fedsim/svg.hpp"
#include "fedsim/toy_models.hpp"

namespace fedsim {

// Experiment orchestration: JSON config in, split/run/grid/report commands
// out. All non-plot outputs are byte-identical across reruns with the same
// seed; wall-clock timings go to a separate file for that reason.

struct GridSpec {
  std::vector<double> lrs{0.5, 1.0, 1.5};
  std::vector<double> momenta{0.1, 0.3, 0.5, 0.7, 0.9};
  int parallel = 1;
};

struct ModelSpec {
  size_t hidden = 0;  // regression only: 0 = linear, >0 = MLP width
};

struct ExperimentConfig {
  std::string task = "regression";  // regression | classification | detection
  std::string name = "model";
  uint64_t seed = 0;
  std::string out = "out";

  std::optional<std::string> manifest_path;
  std::optional<SyntheticSpec> synthetic;

  std::string split_strategy = "iid";  // iid | rules
  double server_fraction = 0.25;
  int clients = 5;
  SplitRules rules;

  TrainConfig train;
  ServerOptConfig server_opt;
  ModelSpec model;
  std::string transport = "inproc";
  int timeout_ms = 30000;
  std::optional<GridSpec> grid;

  void validate() const {
    if (task != "regression" && task != "classification" && task != "detection") {
      throw ConfigError("unknown task '" + task + "'");
    }
    if (!manifest_path && !synthetic) {
      throw ConfigError("config needs either 'manifest' or 'synthetic'");
    }
    if (split_strategy != "iid" && split_strategy != "rules") {
      throw ConfigError("unknown split strategy '" + split_strategy + "'");
    }
    if (!(server_fraction >= 0.0 && server_fraction <= 1.0)) {
      throw ConfigError("split.server_fraction must lie in [0,1], got " +
                        std::to_string(server_fraction));
    }
    if (clients < 1) throw ConfigError("split.clients must be >= 1");
    if (timeout_ms <= 0) throw ConfigError("timeout_ms must be positive");
    transport_kind_from_string(transport);
    train.validate();
    server_opt.validate();
    if (grid) {
      if (grid->lrs.empty() || grid->momenta.empty()) {
        throw ConfigError("grid needs at least one lr and one momentum");
      }
      if (grid->parallel < 1) throw ConfigError("grid.parallel must be >= 1");
    }
  }

  FederationConfig federation() const {
    FederationConfig f;
    f.clients = clients;
    f.seed = seed;
    f.train = train;
    f.optimizer = server_opt;
    f.timeout = std::chrono::milliseconds(timeout_ms);
    f.model_name = name;
    return f;
  }
};

// ---- config parsing ----

namespace detail {

inline void warn_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                         const std::string& scope, std::vector<std::string>* warnings) {
  if (!warnings || !j.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      warnings->push_back("ignoring unknown key '" + scope + it.key() + "'");
    }
  }
}

inline RulePredicate predicate_from_json(const nlohmann::json& j) {
  RulePredicate p;
  if (j.contains("location")) p.location = j["location"].get<std::string>();
  if (j.contains("months")) {
    for (const auto& m : j["months"]) p.months.insert(m.get<int>());
  }
  return p;
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                                    std::vector<std::string>* warnings) {
  ExperimentConfig cfg;
  detail::warn_unknown(j,
                       {"task", "name", "seed", "out", "manifest", "synthetic", "split",
                        "train", "server_opt", "model", "transport", "timeout_ms", "grid",
                        "augmentation"},
                       "", warnings);
  if (j.contains("augmentation") && warnings) {
    warnings->push_back("'augmentation' settings are accepted but ignored: the simulator "
                        "trains on manifests as-is");
  }
  cfg.task = j.value("task", cfg.task);
  cfg.name = j.value("name", cfg.name);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out = j.value("out", cfg.out);
  if (j.contains("manifest")) cfg.manifest_path = j["manifest"].get<std::string>();
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    detail::warn_unknown(s,
                         {"samples", "features", "noise", "locations", "log_length",
                          "location_shift", "classes", "boxes_per_sample", "offset_x",
                          "offset_y", "center_noise"},
                         "synthetic.", warnings);
    SyntheticSpec spec;
    spec.task = cfg.task == "detection" ? "detection"
                : cfg.task == "classification" ? "classification"
                                               : "regression";
    spec.samples = s.value("samples", spec.samples);
    spec.features = s.value("features", spec.features);
    spec.noise = s.value("noise", spec.noise);
    if (s.contains("locations")) {
      spec.locations = s["locations"].get<std::vector<std::string>>();
    }
    spec.log_length = s.value("log_length", spec.log_length);
    spec.location_shift = s.value("location_shift", spec.location_shift);
    spec.classes = s.value("classes", spec.classes);
    spec.boxes_per_sample = s.value("boxes_per_sample", spec.boxes_per_sample);
    spec.offset_x = s.value("offset_x", spec.offset_x);
    spec.offset_y = s.value("offset_y", spec.offset_y);
    spec.center_noise = s.value("center_noise", spec.center_noise);
    cfg.synthetic = spec;
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    detail::warn_unknown(s, {"strategy", "server_fraction", "clients", "rules"}, "split.",
                         warnings);
    cfg.split_strategy = s.value("strategy", cfg.split_strategy);
    cfg.server_fraction = s.value("server_fraction", cfg.server_fraction);
    cfg.clients = s.value("clients", cfg.clients);
    if (s.contains("rules")) {
      const auto& r = s["rules"];
      detail::warn_unknown(r, {"direct", "pools"}, "split.rules.", warnings);
      if (r.contains("direct")) {
        for (const auto& d : r["direct"]) {
          detail::warn_unknown(d, {"shard", "location", "months"}, "split.rules.direct.",
                               warnings);
          DirectRule rule;
          rule.shard = d.value("shard", 0);
          rule.pred = detail::predicate_from_json(d);
          cfg.rules.direct.push_back(rule);
        }
      }
      if (r.contains("pools")) {
        for (const auto& p : r["pools"]) {
          detail::warn_unknown(p, {"shards", "location", "months"}, "split.rules.pools.",
                               warnings);
          PoolRule rule;
          if (p.contains("shards")) rule.shards = p["shards"].get<std::vector<int>>();
          rule.pred = detail::predicate_from_json(p);
          cfg.rules.pools.push_back(rule);
        }
      }
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::warn_unknown(t,
                         {"rounds", "epochs_per_round", "batch_size", "mode", "fixed_lr",
                          "warmup_epochs", "lr_bias_init", "lr_other_init", "lr_peak",
                          "lr_final", "momentum_init", "momentum_final", "weight_decay"},
                         "train.", warnings);
    cfg.train.rounds = t.value("rounds", cfg.train.rounds);
    cfg.train.epochs_per_round = t.value("epochs_per_round", cfg.train.epochs_per_round);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    if (t.contains("mode")) cfg.train.mode = local_mode_from_string(t["mode"].get<std::string>());
    cfg.train.fixed_lr = t.value("fixed_lr", cfg.train.fixed_lr);
    cfg.train.warmup_epochs = t.value("warmup_epochs", cfg.train.warmup_epochs);
    cfg.train.lr_bias_init = t.value("lr_bias_init", cfg.train.lr_bias_init);
    cfg.train.lr_other_init = t.value("lr_other_init", cfg.train.lr_other_init);
    cfg.train.lr_peak = t.value("lr_peak", cfg.train.lr_peak);
    cfg.train.lr_final = t.value("lr_final", cfg.train.lr_final);
    cfg.train.momentum_init = t.value("momentum_init", cfg.train.momentum_init);
    cfg.train.momentum_final = t.value("momentum_final", cfg.train.momentum_final);
    cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
  }
  if (j.contains("server_opt")) {
    const auto& o = j["server_opt"];
    detail::warn_unknown(o, {"kind", "lr", "momentum", "beta1", "beta2", "tau"},
                         "server_opt.", warnings);
    if (o.contains("kind")) {
      cfg.server_opt.kind = server_opt_kind_from_string(o["kind"].get<std::string>());
    }
    cfg.server_opt.lr = o.value("lr", cfg.server_opt.lr);
    cfg.server_opt.momentum = o.value("momentum", cfg.server_opt.momentum);
    cfg.server_opt.beta1 = o.value("beta1", cfg.server_opt.beta1);
    cfg.server_opt.beta2 = o.value("beta2", cfg.server_opt.beta2);
    cfg.server_opt.tau = o.value("tau", cfg.server_opt.tau);
  }
  if (j.contains("model")) {
    detail::warn_unknown(j["model"], {"hidden"}, "model.", warnings);
    cfg.model.hidden = j["model"].value("hidden", cfg.model.hidden);
  }
  cfg.transport = j.value("transport", cfg.transport);
  cfg.timeout_ms = j.value("timeout_ms", cfg.timeout_ms);
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    detail::warn_unknown(g, {"lrs", "momenta", "parallel"}, "grid.", warnings);
    GridSpec spec;
    if (g.contains("lrs")) spec.lrs = g["lrs"].get<std::vector<double>>();
    if (g.contains("momenta")) spec.momenta = g["momenta"].get<std::vector<double>>();
    spec.parallel = g.value("parallel", spec.parallel);
    cfg.grid = spec;
  }
  cfg.validate();
  return cfg;
}

struct LoadedConfig {
  ExperimentConfig cfg;
  std::vector<std::string> warnings;
};

inline LoadedConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  LoadedConfig out;
  out.cfg = experiment_config_from_json(j, &out.warnings);
  return out;
}

// ---- task assembly ----

inline Manifest materialize_manifest(const ExperimentConfig& cfg) {
  if (cfg.manifest_path) return Manifest::load_jsonl(*cfg.manifest_path);
  return synthesize_manifest(*cfg.synthetic, cfg.seed);
}

inline SplitManifest compute_split(const ExperimentConfig& cfg, const Manifest& m) {
  if (cfg.split_strategy == "iid") {
    return split_iid(m, cfg.server_fraction, cfg.clients, cfg.seed);
  }
  return split_by_rules(m, cfg.rules, cfg.clients, cfg.seed);
}

struct TaskBundle {
  std::function<std::shared_ptr<LocalModel>(int)> client_model;
  std::shared_ptr<LocalModel> eval_model;
  ParameterSet init;
};

inline TaskBundle build_task(const ExperimentConfig& cfg, const Manifest& manifest,
                             const SplitManifest& split) {
  TaskBundle bundle;
  if (cfg.task == "detection") {
    auto eval_set = detection_set(manifest, split.server_ids);
    bundle.eval_model = std::make_shared<DetectionCalibrationModel>(eval_set);
    bundle.client_model = [&manifest, &split](int id) -> std::shared_ptr<LocalModel> {
      auto ds = detection_set(manifest, split.client_ids[static_cast<size_t>(id - 1)]);
      return std::make_shared<DetectionCalibrationModel>(ds);
    };
    bundle.init = bundle.eval_model->params();
    return bundle;
  }

  size_t features = 0;
  for (const auto& s : manifest.samples) {
    if (!s.features.empty()) {
      features = s.features.size();
      break;
    }
  }
  if (features == 0) throw ConfigError("manifest has no feature vectors");

  if (cfg.task == "classification") {
    auto eval_set = toy_dataset(manifest, split.server_ids);
    bundle.eval_model = std::make_shared<LogisticRegressionModel>(eval_set, features);
    bundle.client_model = [&manifest, &split, features](int id) {
      auto ds = toy_dataset(manifest, split.client_ids[static_cast<size_t>(id - 1)]);
      return std::static_pointer_cast<LocalModel>(
          std::make_shared<LogisticRegressionModel>(ds, features));
    };
    bundle.init = bundle.eval_model->params();
    return bundle;
  }

  if (cfg.model.hidden > 0) {
    const uint64_t init_seed = derive_seed(cfg.seed, "model-init");
    const size_t hidden = cfg.model.hidden;
    auto eval_set = toy_dataset(manifest, split.server_ids);
    bundle.eval_model =
        std::make_shared<MlpRegressionModel>(eval_set, features, hidden, init_seed);
    bundle.client_model = [&manifest, &split, features, hidden, init_seed](int id) {
      auto ds = toy_dataset(manifest, split.client_ids[static_cast<size_t>(id - 1)]);
      return std::static_pointer_cast<LocalModel>(
          std::make_shared<MlpRegressionModel>(ds, features, hidden, init_seed));
    };
  } else {
    auto eval_set = toy_dataset(manifest, split.server_ids);
    bundle.eval_model = std::make_shared<LinearRegressionModel>(eval_set, features);
    bundle.client_model = [&manifest, &split, features](int id) {
      auto ds = toy_dataset(manifest, split.client_ids[static_cast<size_t>(id - 1)]);
      return std::static_pointer_cast<LocalModel>(
          std::make_shared<LinearRegressionModel>(ds, features));
    };
  }
  bundle.init = bundle.eval_model->params();
  return bundle;
}

// ---- record serialization ----

inline nlohmann::ordered_json eval_to_json(const EvalMetrics& e) {
  nlohmann::ordered_json j;
  if (e.loss) j["loss"] = *e.loss;
  if (e.accuracy) j["accuracy"] = *e.accuracy;
  if (e.map) {
    j["map"] = *e.map;
    j["map_per_threshold"] = e.map_per_threshold;
  }
  return j;
}

inline EvalMetrics eval_from_json(const nlohmann::json& j) {
  EvalMetrics e;
  if (j.contains("loss")) e.loss = j["loss"].get<double>();
  if (j.contains("accuracy")) e.accuracy = j["accuracy"].get<double>();
  if (j.contains("map")) {
    e.map = j["map"].get<double>();
    if (j.contains("map_per_threshold")) {
      e.map_per_threshold = j["map_per_threshold"].get<std::vector<double>>();
    }
  }
  return e;
}

inline nlohmann::ordered_json round_to_json(const RoundRecord& r) {
  nlohmann::ordered_json j;
  j["round"] = r.round;
  j["train_loss"] = r.train_loss;
  j["eval"] = eval_to_json(r.eval);
  auto clients = nlohmann::ordered_json::array();
  for (const auto& c : r.clients) {
    nlohmann::ordered_json e;
    e["id"] = c.client_id;
    e["samples"] = c.samples;
    e["loss"] = c.loss;
    e["bytes_to"] = c.bytes_to_client;
    e["bytes_from"] = c.bytes_from_client;
    clients.push_back(e);
  }
  j["clients"] = clients;
  return j;
}

inline RoundRecord round_from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.round = j.at("round").get<int>();
  r.train_loss = j.at("train_loss").get<double>();
  r.eval = eval_from_json(j.at("eval"));
  for (const auto& c : j.at("clients")) {
    ClientRoundStat s;
    s.client_id = c.at("id").get<int>();
    s.samples = c.at("samples").get<uint64_t>();
    s.loss = c.at("loss").get<double>();
    s.bytes_to_client = c.value("bytes_to", uint64_t{0});
    s.bytes_from_client = c.value("bytes_from", uint64_t{0});
    r.clients.push_back(s);
  }
  return r;
}

// ---- commands ----

struct SplitOutput {
  SplitManifest split;
  std::filesystem::path split_path;
  std::filesystem::path skew_path;
};

inline SplitOutput cmd_split(const ExperimentConfig& cfg,
                             const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Manifest manifest = materialize_manifest(cfg);
  if (!cfg.manifest_path) manifest.save_jsonl(out_dir / "manifest.jsonl");
  SplitOutput out;
  out.split = compute_split(cfg, manifest);
  out.split_path = out_dir / "split.json";
  out.split.save(out.split_path);
  const SkewReport skew = skew_report(manifest, out.split, cfg.seed);
  out.skew_path = out_dir / "skew.json";
  std::ofstream f(out.skew_path);
  f << skew.to_json().dump(2) << '\n';
  return out;
}

inline FederationResult execute_federation(const ExperimentConfig& cfg,
                                           const Manifest& manifest,
                                           const SplitManifest& split,
                                           const ServerOptConfig& opt,
                                           FrameObserver observer = {}) {
  TaskBundle bundle = build_task(cfg, manifest, split);
  SimulationSetup setup;
  setup.cfg = cfg.federation();
  setup.cfg.optimizer = opt;
  setup.init = bundle.init;
  setup.client_model = bundle.client_model;
  setup.eval_model = bundle.eval_model;
  setup.transport = transport_kind_from_string(cfg.transport);
  setup.observer = std::move(observer);
  return run_federation(setup);
}

struct RunOutput {
  FederationResult fed;
  std::filesystem::path records_path;
  std::filesystem::path summary_path;
  std::filesystem::path checkpoint_path;
};

namespace detail {

inline nlohmann::ordered_json summary_json(const ExperimentConfig& cfg,
                                           const ServerOptConfig& opt,
                                           const FederationResult& fed) {
  nlohmann::ordered_json j;
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["clients"] = cfg.clients;
  j["rounds"] = cfg.train.rounds;
  j["epochs_per_round"] = cfg.train.epochs_per_round;
  j["total_epochs"] = cfg.train.total_epochs();
  j["transport"] = cfg.transport;
  nlohmann::ordered_json o;
  o["kind"] = to_string(opt.kind);
  o["lr"] = opt.lr;
  o["momentum"] = opt.momentum;
  o["beta1"] = opt.beta1;
  o["beta2"] = opt.beta2;
  o["tau"] = opt.tau;
  j["optimizer"] = o;
  const RoundRecord& last = fed.rounds.back();
  nlohmann::ordered_json fin;
  fin["train_loss"] = last.train_loss;
  fin["eval"] = eval_to_json(last.eval);
  j["final"] = fin;
  nlohmann::ordered_json best;
  best["round"] = fed.best_round;
  best["metric"] = fed.best_metric;
  j["best"] = best;
  uint64_t to_clients = 0, from_clients = 0;
  for (const auto& r : fed.rounds) {
    for (const auto& c : r.clients) {
      to_clients += c.bytes_to_client;
      from_clients += c.bytes_from_client;
    }
  }
  nlohmann::ordered_json bytes;
  bytes["to_clients"] = to_clients;
  bytes["from_clients"] = from_clients;
  j["bytes"] = bytes;
  return j;
}

inline void write_detection_tables(const ExperimentConfig& cfg, const Manifest& manifest,
                                   const SplitManifest& split, const Checkpoint& best,
                                   const std::filesystem::path& out_dir) {
  auto eval_set = detection_set(manifest, split.server_ids);
  DetectionCalibrationModel model(eval_set);
  model.set_params(best.params);
  const auto records = model.corrected_records();
  const auto thresholds = standard_iou_thresholds();
  const MapResult r = mean_ap(records, thresholds);

  std::ofstream csv(out_dir / "ap.csv");
  csv << "class,iou_threshold,ap\n";
  char buf[64];
  for (const auto& [cls, per_t] : r.ap) {
    for (const auto& [t, ap] : per_t) {
      std::snprintf(buf, sizeof(buf), "%d,%.2f,%.17g\n", cls, t, ap);
      csv << buf;
    }
  }
  nlohmann::ordered_json j;
  j["map"] = r.mean;
  nlohmann::ordered_json per_t;
  for (const auto& [t, v] : r.by_threshold) {
    std::snprintf(buf, sizeof(buf), "%.2f", t);
    per_t[buf] = v;
  }
  j["by_threshold"] = per_t;
  nlohmann::ordered_json per_c;
  for (const auto& [cls, v] : r.by_class) per_c[std::to_string(cls)] = v;
  j["by_class"] = per_c;
  j["evaluated_classes"] = r.evaluated_classes;
  j["skipped_classes"] = r.skipped_classes;
  std::ofstream mj(out_dir / "map.json");
  mj << j.dump(2) << '\n';
}

}  // namespace detail

inline RunOutput cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  const Manifest manifest = materialize_manifest(cfg);
  const auto split_path = out_dir / "split.json";
  if (!std::filesystem::exists(split_path)) {
    throw ConfigError("no split found at '" + split_path.string() +
                      "'; run the split command first");
  }
  const SplitManifest split = SplitManifest::load(split_path);
  if (split.clients() != cfg.clients) {
    throw ConfigError("split was built for " + std::to_string(split.clients()) +
                      " clients but the config asks for " + std::to_string(cfg.clients));
  }
  validate_split(manifest, split);

  RunOutput out;
  out.fed = execute_federation(cfg, manifest, split, cfg.server_opt);

  std::filesystem::create_directories(out_dir);
  out.records_path = out_dir / "records.jsonl";
  {
    std::ofstream f(out.records_path);
    for (const auto& r : out.fed.rounds) f << round_to_json(r).dump() << '\n';
  }
  out.summary_path = out_dir / "summary.json";
  {
    std::ofstream f(out.summary_path);
    f << detail::summary_json(cfg, cfg.server_opt, out.fed).dump(2) << '\n';
  }
  {
    nlohmann::ordered_json t;
    auto arr = nlohmann::ordered_json::array();
    double total = 0.0;
    for (const auto& r : out.fed.rounds) {
      arr.push_back(r.wall_ms);
      total += r.wall_ms;
    }
    t["round_wall_ms"] = arr;
    t["total_wall_ms"] = total;
    std::ofstream f(out_dir / "timings.json");
    f << t.dump(2) << '\n';
  }
  out.checkpoint_path = out_dir / "best.ckpt";
  {
    const auto bytes = encode_checkpoint(out.fed.best);
    std::ofstream f(out.checkpoint_path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  }
  if (cfg.task == "detection") {
    detail::write_detection_tables(cfg, manifest, split, out.fed.best, out_dir);
  }
  return out;
}

// ---- grid sweeps ----

struct GridCell {
  double lr = 0.0;
  double momentum = 0.0;
  bool ok = false;
  std::string error;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_primary = std::numeric_limits<double>::quiet_NaN();
  int best_round = -1;
  FederationResult fed;
};

struct GridOutput {
  std::vector<GridCell> cells;  // row-major: lrs x momenta
  std::filesystem::path csv_path;
  std::filesystem::path svg_path;
};

inline GridOutput cmd_grid(const ExperimentConfig& cfg,
                           const std::filesystem::path& out_dir) {
  if (!cfg.grid) throw ConfigError("config has no 'grid' section");
  const GridSpec& spec = *cfg.grid;
  const Manifest manifest = materialize_manifest(cfg);
  const auto split_path = out_dir / "split.json";
  if (!std::filesystem::exists(split_path)) {
    throw ConfigError("no split found at '" + split_path.string() +
                      "'; run the split command first");
  }
  const SplitManifest split = SplitManifest::load(split_path);
  validate_split(manifest, split);

  GridOutput out;
  out.cells.resize(spec.lrs.size() * spec.momenta.size());
  for (size_t li = 0; li < spec.lrs.size(); ++li) {
    for (size_t mi = 0; mi < spec.momenta.size(); ++mi) {
      auto& cell = out.cells[li * spec.momenta.size() + mi];
      cell.lr = spec.lrs[li];
      cell.momentum = spec.momenta[mi];
    }
  }

  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= out.cells.size()) return;
      GridCell& cell = out.cells[i];
      try {
        ServerOptConfig opt = cfg.server_opt;
        opt.lr = cell.lr;
        opt.momentum = cell.momentum;
        cell.fed = execute_federation(cfg, manifest, split, opt);
        cell.final_train_loss = cell.fed.rounds.back().train_loss;
        cell.final_primary = cell.fed.rounds.back().eval.primary();
        cell.best_round = cell.fed.best_round;
        cell.ok = true;
      } catch (const Error& e) {
        cell.error = e.what();
      }
    }
  };
  const int workers = std::min<int>(spec.parallel, static_cast<int>(out.cells.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::filesystem::create_directories(out_dir);
  out.csv_path = out_dir / "grid.csv";
  {
    std::ofstream csv(out.csv_path);
    csv << "server_lr,server_momentum,final_train_loss,final_primary,best_round,status\n";
    char buf[256];
    for (const auto& c : out.cells) {
      if (c.ok) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%d,ok\n", c.lr, c.momentum,
                      c.final_train_loss, c.final_primary, c.best_round);
      } else {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,,,,failed\n", c.lr, c.momentum);
      }
      csv << buf;
    }
  }
  out.svg_path = out_dir / "grid.svg";
  {
    std::vector<std::string> rows, cols;
    char buf[64];
    for (double lr : spec.lrs) {
      std::snprintf(buf, sizeof(buf), "%g", lr);
      rows.push_back(buf);
    }
    for (double mom : spec.momenta) {
      std::snprintf(buf, sizeof(buf), "%g", mom);
      cols.push_back(buf);
    }
    std::vector<std::vector<double>> values(rows.size(),
                                            std::vector<double>(cols.size(), 0.0));
    for (size_t li = 0; li < spec.lrs.size(); ++li) {
      for (size_t mi = 0; mi < spec.momenta.size(); ++mi) {
        const auto& c = out.cells[li * spec.momenta.size() + mi];
        values[li][mi] = c.ok ? c.final_primary : std::numeric_limits<double>::quiet_NaN();
      }
    }
    write_heatmap(out.svg_path, "server optimizer sweep", "server lr", "server momentum",
                  rows, cols, values);
  }
  // Per-cell summaries for drill-down.
  for (const auto& c : out.cells) {
    if (!c.ok) continue;
    char dirname[128];
    std::snprintf(dirname, sizeof(dirname), "cell_lr%g_m%g", c.lr, c.momentum);
    const auto cell_dir = out_dir / "cells" / dirname;
    std::filesystem::create_directories(cell_dir);
    ServerOptConfig opt = cfg.server_opt;
    opt.lr = c.lr;
    opt.momentum = c.momentum;
    std::ofstream f(cell_dir / "summary.json");
    f << detail::summary_json(cfg, opt, c.fed).dump(2) << '\n';
  }
  return out;
}

// ---- reports ----

struct ReportOutput {
  std::vector<RoundRecord> records;
  std::filesystem::path loss_svg;
  std::filesystem::path metric_svg;
  std::filesystem::path report_path;
};

inline ReportOutput cmd_report(const std::filesystem::path& records_path,
                               const std::filesystem::path& out_dir) {
  std::ifstream in(records_path);
  if (!in) throw ConfigError("cannot open records '" + records_path.string() + "'");
  ReportOutput out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      out.records.push_back(round_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("records line " + std::to_string(lineno) + ": " + e.what());
    }
    const RoundRecord& r = out.records.back();
    if (r.clients.empty()) {
      throw ConfigError("records line " + std::to_string(lineno) + ": no client entries");
    }
    double weighted = 0.0;
    uint64_t n = 0;
    for (const auto& c : r.clients) {
      weighted += static_cast<double>(c.samples) * c.loss;
      n += c.samples;
    }
    weighted /= static_cast<double>(n);
    if (std::fabs(weighted - r.train_loss) > 1e-9) {
      throw ConfigError("records line " + std::to_string(lineno) +
                        ": stored train_loss " + std::to_string(r.train_loss) +
                        " does not match recomputed " + std::to_string(weighted));
    }
    if (out.records.size() > 1 &&
        out.records[out.records.size() - 2].round >= r.round) {
      throw ConfigError("records line " + std::to_string(lineno) +
                        ": round numbers must increase");
    }
  }
  if (out.records.empty()) throw ConfigError("records file is empty");

  std::filesystem::create_directories(out_dir);
  PlotSeries train{"train loss", {}, {}};
  PlotSeries eval_loss{"eval loss", {}, {}};
  for (const auto& r : out.records) {
    train.xs.push_back(r.round);
    train.ys.push_back(r.train_loss);
    if (r.eval.loss) {
      eval_loss.xs.push_back(r.round);
      eval_loss.ys.push_back(*r.eval.loss);
    }
  }
  std::vector<PlotSeries> loss_series{train};
  if (!eval_loss.xs.empty()) loss_series.push_back(eval_loss);
  out.loss_svg = out_dir / "loss.svg";
  write_line_plot(out.loss_svg, "training progress", "round", "loss", loss_series);

  PlotSeries metric{"", {}, {}};
  std::string metric_name = "eval loss";
  for (const auto& r : out.records) {
    if (r.eval.map) metric_name = "mAP@0.5:0.95";
    else if (r.eval.accuracy && metric_name == "eval loss") metric_name = "accuracy";
  }
  for (const auto& r : out.records) {
    double v;
    if (metric_name == "mAP@0.5:0.95" && r.eval.map) v = *r.eval.map;
    else if (metric_name == "accuracy" && r.eval.accuracy) v = *r.eval.accuracy;
    else if (metric_name == "eval loss" && r.eval.loss) v = *r.eval.loss;
    else continue;
    metric.xs.push_back(r.round);
    metric.ys.push_back(v);
  }
  metric.label = metric_name;
  out.metric_svg = out_dir / "metric.svg";
  write_line_plot(out.metric_svg, "evaluation metric", "round", metric_name, {metric});

  int best_round = -1;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : out.records) {
    const double p = r.eval.primary();
    if (p > best) {
      best = p;
      best_round = r.round;
    }
  }
  nlohmann::ordered_json j;
  j["rounds"] = out.records.size();
  j["final_train_loss"] = out.records.back().train_loss;
  j["final_eval"] = eval_to_json(out.records.back().eval);
  nlohmann::ordered_json b;
  b["round"] = best_round;
  b["metric"] = best;
  j["best"] = b;
  out.report_path = out_dir / "report.json";
  std::ofstream f(out.report_path);
  f << j.dump(2) << '\n';
  return out;
}

}  // namespace fedsim
