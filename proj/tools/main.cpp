#include <iostream>

#include <CLI11.hpp>

#include "experiment.hpp"

using namespace vitdiv::cli;

int main(int argc, char** argv) {
  CLI::App app{"Measure and reduce redundancy in vision transformers"};
  app.require_subcommand(1);

  Overrides o;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--out", o.out, "Output directory (relative paths honour $VITDIV_OUTPUT_ROOT)");
  };
  auto add_run = [&](CLI::App* cmd) {
    cmd->add_option("--seed", o.seed, "Training seed (model init, batch order, mixing)");
    cmd->add_option("--preset", o.preset, "Regularizer preset replacing the config's regularizers");
    cmd->add_option("--k-grid", o.k_grid, "PCA ranks for redundancy reports")->delimiter(',');
  };

  std::string config, checkpoint, data, report_a, report_b;

  auto* train = app.add_subcommand("train", "Train a model and write logs, reports and checkpoints");
  train->add_option("config", config, "Experiment config JSON")->required();
  add_run(train);
  add_common(train);

  auto* analyze = app.add_subcommand("analyze", "Redundancy report of a checkpoint on a probe set");
  analyze->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  analyze->add_option("data", data, "Dataset spec JSON or experiment config JSON")->required();
  analyze->add_option("--k-grid", o.k_grid, "PCA ranks")->delimiter(',');
  add_common(analyze);

  auto* compare = app.add_subcommand("compare", "Per-layer deltas between two reports (b - a)");
  compare->add_option("a", report_a, "Report JSON")->required();
  compare->add_option("b", report_b, "Report JSON")->required();
  add_common(compare);

  auto* ablate = app.add_subcommand("ablate", "Run the regularizer ablation grid on a base config");
  ablate->add_option("config", config, "Experiment config JSON")->required();
  add_run(ablate);
  add_common(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUserError;
  }

  Streams io{std::cout, std::cerr};
  if (*train) return cmd_train(config, o, io);
  if (*analyze) return cmd_analyze(checkpoint, data, o, io);
  if (*compare) return cmd_compare(report_a, report_b, o, io);
  return cmd_ablate(config, o, io);
}
