#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedsim/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
  std::optional<std::string> transport;
};

fedsim::ExperimentConfig load_with_overrides(const CommonArgs& args,
                                             std::filesystem::path* out_dir) {
  fedsim::LoadedConfig loaded = fedsim::load_experiment_config(args.config);
  for (const auto& w : loaded.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  if (args.seed) loaded.cfg.seed = *args.seed;
  if (args.transport) loaded.cfg.transport = *args.transport;
  loaded.cfg.validate();
  *out_dir = args.out.empty() ? std::filesystem::path(loaded.cfg.out)
                              : std::filesystem::path(args.out);
  return loaded.cfg;
}

void add_common(CLI::App* cmd, CommonArgs* args, bool with_transport) {
  cmd->add_option("-c,--config", args->config, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", args->out, "output directory (overrides config)");
  cmd->add_option("--seed", args->seed, "seed override");
  if (with_transport) {
    cmd->add_option("--transport", args->transport, "inproc or socket");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated optimization simulator"};
  app.require_subcommand(1);

  CommonArgs split_args, run_args, grid_args;
  std::string records_path, report_out = "report";

  CLI::App* split = app.add_subcommand("split", "partition a manifest into client shards");
  add_common(split, &split_args, false);

  CLI::App* run = app.add_subcommand("run", "run a federated experiment");
  add_common(run, &run_args, true);

  CLI::App* grid = app.add_subcommand("grid", "sweep server optimizer hyperparameters");
  add_common(grid, &grid_args, true);

  CLI::App* report = app.add_subcommand("report", "render plots from a records file");
  report->add_option("-r,--records", records_path, "records.jsonl from a run")
      ->required()
      ->check(CLI::ExistingFile);
  report->add_option("-o,--out", report_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (split->parsed()) {
      std::filesystem::path out_dir;
      const auto cfg = load_with_overrides(split_args, &out_dir);
      const auto out = fedsim::cmd_split(cfg, out_dir);
      std::printf("split: %zu server samples, %d client shards -> %s\n",
                  out.split.server_ids.size(), out.split.clients(),
                  out.split_path.string().c_str());
    } else if (run->parsed()) {
      std::filesystem::path out_dir;
      const auto cfg = load_with_overrides(run_args, &out_dir);
      const auto out = fedsim::cmd_run(cfg, out_dir);
      const auto& last = out.fed.rounds.back();
      std::printf("run: %zu rounds, final train loss %.6g, best round %d (metric %.6g)\n",
                  out.fed.rounds.size(), last.train_loss, out.fed.best_round,
                  out.fed.best_metric);
      std::printf("records: %s\n", out.records_path.string().c_str());
    } else if (grid->parsed()) {
      std::filesystem::path out_dir;
      const auto cfg = load_with_overrides(grid_args, &out_dir);
      const auto out = fedsim::cmd_grid(cfg, out_dir);
      size_t ok = 0;
      for (const auto& c : out.cells) ok += c.ok ? 1 : 0;
      std::printf("grid: %zu/%zu cells succeeded -> %s\n", ok, out.cells.size(),
                  out.csv_path.string().c_str());
      for (const auto& c : out.cells) {
        if (!c.ok) {
          std::fprintf(stderr, "cell lr=%g momentum=%g failed: %s\n", c.lr, c.momentum,
                       c.error.c_str());
        }
      }
    } else if (report->parsed()) {
      const auto out = fedsim::cmd_report(records_path, report_out);
      std::printf("report: %zu rounds -> %s\n", out.records.size(),
                  out.report_path.string().c_str());
    }
  } catch (const fedsim::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
