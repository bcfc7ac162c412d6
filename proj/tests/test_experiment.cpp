#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/experiment.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

nlohmann::json base_config_json() {
  return nlohmann::json::parse(R"({
    "task": "regression",
    "seed": 5,
    "synthetic": {"samples": 60, "features": 3, "noise": 0.05},
    "split": {"strategy": "iid", "server_fraction": 0.2, "clients": 3},
    "train": {"rounds": 3, "epochs_per_round": 2, "batch_size": 8,
              "mode": "fixed", "fixed_lr": 0.05},
    "server_opt": {"kind": "fedavg", "lr": 1.0}
  })");
}

ExperimentConfig base_config() { return experiment_config_from_json(base_config_json(), nullptr); }

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fedsim_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t line_count(const std::string& text) {
  size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("config parsing fills defaults and validates") {
  const ExperimentConfig cfg = base_config();
  REQUIRE(cfg.task == "regression");
  REQUIRE(cfg.name == "model");
  REQUIRE(cfg.seed == 5);
  REQUIRE(cfg.clients == 3);
  REQUIRE(cfg.server_fraction == 0.2);
  REQUIRE(cfg.train.rounds == 3);
  REQUIRE(cfg.transport == "inproc");
  REQUIRE(cfg.timeout_ms == 30000);
  REQUIRE(cfg.synthetic.has_value());
  REQUIRE(cfg.synthetic->samples == 60);
  REQUIRE_FALSE(cfg.grid.has_value());

  auto bad_task = base_config_json();
  bad_task["task"] = "segmentation";
  REQUIRE_THROWS_AS(experiment_config_from_json(bad_task, nullptr), ConfigError);

  auto no_data = base_config_json();
  no_data.erase("synthetic");
  REQUIRE_THROWS_AS(experiment_config_from_json(no_data, nullptr), ConfigError);

  auto bad_clients = base_config_json();
  bad_clients["split"]["clients"] = 0;
  REQUIRE_THROWS_AS(experiment_config_from_json(bad_clients, nullptr), ConfigError);

  auto bad_transport = base_config_json();
  bad_transport["transport"] = "udp";
  REQUIRE_THROWS_AS(experiment_config_from_json(bad_transport, nullptr), ConfigError);

  auto empty_grid = base_config_json();
  empty_grid["grid"] = {{"lrs", nlohmann::json::array()}};
  REQUIRE_THROWS_AS(experiment_config_from_json(empty_grid, nullptr), ConfigError);
}

TEST_CASE("unknown config keys warn instead of failing") {
  auto j = base_config_json();
  j["frobnicate"] = 1;
  j["train"]["nesterov"] = true;
  j["augmentation"] = {{"mosaic", 1.0}, {"mixup", 0.1}};

  std::vector<std::string> warnings;
  const ExperimentConfig cfg = experiment_config_from_json(j, &warnings);
  REQUIRE(cfg.train.rounds == 3);

  bool top = false, nested = false, aug = false;
  for (const auto& w : warnings) {
    top = top || w.find("'frobnicate'") != std::string::npos;
    nested = nested || w.find("'train.nesterov'") != std::string::npos;
    aug = aug || w.find("accepted but ignored") != std::string::npos;
  }
  REQUIRE(top);
  REQUIRE(nested);
  REQUIRE(aug);
}

TEST_CASE("config files load from disk") {
  const fs::path dir = fresh_dir("cfgload");
  const fs::path path = dir / "exp.json";
  {
    std::ofstream f(path);
    f << base_config_json().dump(2);
  }
  const LoadedConfig loaded = load_experiment_config(path);
  REQUIRE(loaded.cfg.seed == 5);
  REQUIRE(loaded.warnings.empty());

  REQUIRE_THROWS_AS(load_experiment_config(dir / "missing.json"), ConfigError);
  {
    std::ofstream f(dir / "broken.json");
    f << "{ not json";
  }
  REQUIRE_THROWS_AS(load_experiment_config(dir / "broken.json"), ConfigError);
}

TEST_CASE("synthetic manifests are deterministic and structured") {
  const ExperimentConfig cfg = base_config();
  const Manifest a = materialize_manifest(cfg);
  const Manifest b = materialize_manifest(cfg);
  REQUIRE(a.size() == 60);
  REQUIRE(b.size() == 60);
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a.samples[i].id == b.samples[i].id);
    REQUIRE(a.samples[i].log_id == b.samples[i].log_id);
    REQUIRE(a.samples[i].features == b.samples[i].features);
    REQUIRE(a.samples[i].target == b.samples[i].target);
    REQUIRE(a.samples[i].features.size() == 3);
  }

  ExperimentConfig other = cfg;
  other.seed = 6;
  const Manifest c = materialize_manifest(other);
  bool any_diff = false;
  for (size_t i = 0; i < a.size(); ++i) {
    any_diff = any_diff || a.samples[i].features != c.samples[i].features;
  }
  REQUIRE(any_diff);
}

TEST_CASE("manifests round-trip through jsonl") {
  const ExperimentConfig cfg = base_config();
  const Manifest m = materialize_manifest(cfg);
  const fs::path dir = fresh_dir("jsonl");
  m.save_jsonl(dir / "m.jsonl");
  const Manifest back = Manifest::load_jsonl(dir / "m.jsonl");
  REQUIRE(back.size() == m.size());
  for (size_t i = 0; i < m.size(); ++i) {
    REQUIRE(back.samples[i].id == m.samples[i].id);
    REQUIRE(back.samples[i].features == m.samples[i].features);
    REQUIRE(back.samples[i].target == m.samples[i].target);
  }
  REQUIRE_THROWS_AS(Manifest::load_jsonl(dir / "absent.jsonl"), ConfigError);
}

TEST_CASE("the split command materializes every artifact") {
  const ExperimentConfig cfg = base_config();
  const fs::path dir = fresh_dir("split");
  const SplitOutput out = cmd_split(cfg, dir);

  REQUIRE(fs::exists(dir / "manifest.jsonl"));
  REQUIRE(fs::exists(out.split_path));
  REQUIRE(fs::exists(out.skew_path));
  REQUIRE(out.split.clients() == 3);

  const SplitManifest loaded = SplitManifest::load(out.split_path);
  REQUIRE(loaded.server_ids == out.split.server_ids);
  validate_split(materialize_manifest(cfg), loaded);

  const auto skew = nlohmann::json::parse(slurp(out.skew_path));
  REQUIRE(skew.contains("chi2"));
  REQUIRE(skew.contains("skewed"));
  REQUIRE(skew.contains("shards"));
}

TEST_CASE("runs require a prior split and a matching client count") {
  const ExperimentConfig cfg = base_config();
  const fs::path dir = fresh_dir("nosplit");
  try {
    cmd_run(cfg, dir);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("run the split command first") != std::string::npos);
  }

  cmd_split(cfg, dir);
  ExperimentConfig wrong = cfg;
  wrong.clients = 4;
  REQUIRE_THROWS_AS(cmd_run(wrong, dir), ConfigError);
}

TEST_CASE("a run writes records, summary, timings and the checkpoint") {
  const ExperimentConfig cfg = base_config();
  const fs::path dir = fresh_dir("run");
  cmd_split(cfg, dir);
  const RunOutput out = cmd_run(cfg, dir);

  REQUIRE(out.fed.rounds.size() == 3);
  const std::string records = slurp(out.records_path);
  REQUIRE(line_count(records) == 3);

  const auto summary = nlohmann::json::parse(slurp(out.summary_path));
  REQUIRE(summary["task"] == "regression");
  REQUIRE(summary["seed"] == 5);
  REQUIRE(summary["clients"] == 3);
  REQUIRE(summary["rounds"] == 3);
  REQUIRE(summary["best"]["round"] == out.fed.best_round);

  const auto timings = nlohmann::json::parse(slurp(dir / "timings.json"));
  REQUIRE(timings["round_wall_ms"].size() == 3);
  REQUIRE(timings["total_wall_ms"].get<double>() >= 0.0);

  const std::string ck_bytes = slurp(out.checkpoint_path);
  const Checkpoint ck = decode_checkpoint(
      std::span(reinterpret_cast<const uint8_t*>(ck_bytes.data()), ck_bytes.size()));
  REQUIRE(ck.meta.at("model") == "model");
  REQUIRE(ck.meta.at("round") == std::to_string(out.fed.best_round));

  // Training moved: the quantized records still show decreasing loss.
  REQUIRE(out.fed.rounds.back().train_loss < out.fed.rounds.front().train_loss);
}

TEST_CASE("re-running a seeded experiment reproduces the records byte for byte") {
  const ExperimentConfig cfg = base_config();
  const fs::path d1 = fresh_dir("rerun1");
  const fs::path d2 = fresh_dir("rerun2");
  cmd_split(cfg, d1);
  cmd_split(cfg, d2);
  cmd_run(cfg, d1);
  cmd_run(cfg, d2);
  REQUIRE(slurp(d1 / "records.jsonl") == slurp(d2 / "records.jsonl"));
  REQUIRE(slurp(d1 / "best.ckpt") == slurp(d2 / "best.ckpt"));
  REQUIRE(slurp(d1 / "split.json") == slurp(d2 / "split.json"));
}

TEST_CASE("round records survive the json round trip") {
  RoundRecord r;
  r.round = 4;
  r.train_loss = 0.125;
  r.wall_ms = 99.0;  // timing is reported separately, never in records
  r.eval.loss = 0.5;
  r.eval.accuracy = 0.75;
  ClientRoundStat c;
  c.client_id = 2;
  c.samples = 10;
  c.loss = 0.125;
  c.bytes_to_client = 400;
  c.bytes_from_client = 300;
  r.clients.push_back(c);

  const auto j = round_to_json(r);
  REQUIRE_FALSE(j.contains("wall_ms"));
  const RoundRecord back = round_from_json(j);
  REQUIRE(back.round == 4);
  REQUIRE(back.train_loss == 0.125);
  REQUIRE(back.wall_ms == 0.0);
  REQUIRE(*back.eval.loss == 0.5);
  REQUIRE(*back.eval.accuracy == 0.75);
  REQUIRE_FALSE(back.eval.map.has_value());
  REQUIRE(back.clients.size() == 1);
  REQUIRE(back.clients[0].client_id == 2);
  REQUIRE(back.clients[0].samples == 10);
  REQUIRE(back.clients[0].bytes_to_client == 400);
}

TEST_CASE("reports recompute and cross-check the records") {
  const ExperimentConfig cfg = base_config();
  const fs::path dir = fresh_dir("report_src");
  cmd_split(cfg, dir);
  const RunOutput run = cmd_run(cfg, dir);

  const fs::path rep_dir = fresh_dir("report_out");
  const ReportOutput rep = cmd_report(run.records_path, rep_dir);
  REQUIRE(rep.records.size() == 3);
  REQUIRE(fs::exists(rep.loss_svg));
  REQUIRE(fs::exists(rep.metric_svg));
  REQUIRE(slurp(rep.loss_svg).find("<svg") != std::string::npos);
  REQUIRE(slurp(rep.metric_svg).find("<svg") != std::string::npos);

  const auto report = nlohmann::json::parse(slurp(rep.report_path));
  REQUIRE(report["rounds"] == 3);
  REQUIRE(report["best"]["round"] == run.fed.best_round);
  REQUIRE(report["final_train_loss"].get<double>() ==
          run.fed.rounds.back().train_loss);
}

TEST_CASE("reports reject tampered or disordered records") {
  const ExperimentConfig cfg = base_config();
  const fs::path dir = fresh_dir("tamper");
  cmd_split(cfg, dir);
  const RunOutput run = cmd_run(cfg, dir);

  std::vector<std::string> lines;
  {
    std::ifstream in(run.records_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) lines.push_back(line);
    }
  }
  REQUIRE(lines.size() == 3);

  const fs::path rep_dir = fresh_dir("tamper_out");

  {  // inflate a stored loss so it disagrees with the per-client entries
    auto j = nlohmann::json::parse(lines[1]);
    j["train_loss"] = j["train_loss"].get<double>() + 0.5;
    std::ofstream f(dir / "doctored.jsonl");
    f << lines[0] << '\n' << j.dump() << '\n' << lines[2] << '\n';
  }
  try {
    cmd_report(dir / "doctored.jsonl", rep_dir);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    REQUIRE(std::string(e.what()).find("does not match recomputed") != std::string::npos);
  }

  {  // duplicated round number
    std::ofstream f(dir / "dup.jsonl");
    f << lines[0] << '\n' << lines[0] << '\n';
  }
  REQUIRE_THROWS_AS(cmd_report(dir / "dup.jsonl", rep_dir), ConfigError);

  {  // syntactically broken line
    std::ofstream f(dir / "broken.jsonl");
    f << lines[0] << '\n' << "{oops\n";
  }
  REQUIRE_THROWS_AS(cmd_report(dir / "broken.jsonl", rep_dir), ConfigError);

  {
    std::ofstream f(dir / "empty.jsonl");
  }
  REQUIRE_THROWS_AS(cmd_report(dir / "empty.jsonl", rep_dir), ConfigError);
}

TEST_CASE("grid sweeps cover all cells and tolerate failures") {
  ExperimentConfig cfg = base_config();
  cfg.train.rounds = 2;
  GridSpec grid;
  grid.lrs = {1.0, -0.5};  // the negative lr cell must fail, not crash
  grid.momenta = {0.0, 0.5};
  grid.parallel = 1;
  cfg.grid = grid;
  cfg.server_opt.kind = ServerOptKind::kFedAvgM;

  const fs::path dir = fresh_dir("grid");
  cmd_split(cfg, dir);
  const GridOutput out = cmd_grid(cfg, dir);
  REQUIRE(out.cells.size() == 4);

  // Row-major: lr 1.0 cells first, then the failing lr -0.5 cells.
  REQUIRE(out.cells[0].ok);
  REQUIRE(out.cells[1].ok);
  REQUIRE_FALSE(out.cells[2].ok);
  REQUIRE_FALSE(out.cells[3].ok);
  REQUIRE_FALSE(out.cells[2].error.empty());

  const std::string csv = slurp(out.csv_path);
  REQUIRE(line_count(csv) == 5);
  REQUIRE(csv.find("server_lr,server_momentum,final_train_loss,final_primary,best_round,"
                   "status") == 0);
  REQUIRE(csv.find(",,,,failed") != std::string::npos);
  REQUIRE(csv.find(",ok") != std::string::npos);

  REQUIRE(slurp(out.svg_path).find("<svg") != std::string::npos);
  REQUIRE(fs::exists(dir / "cells" / "cell_lr1_m0" / "summary.json"));
  REQUIRE_FALSE(fs::exists(dir / "cells" / "cell_lr-0.5_m0"));

  // A parallel sweep must land on the identical table.
  ExperimentConfig par = cfg;
  par.grid->parallel = 4;
  const fs::path dir2 = fresh_dir("grid_par");
  cmd_split(par, dir2);
  const GridOutput out2 = cmd_grid(par, dir2);
  REQUIRE(slurp(out2.csv_path) == csv);

  ExperimentConfig no_grid = base_config();
  REQUIRE_THROWS_AS(cmd_grid(no_grid, dir), ConfigError);
}
