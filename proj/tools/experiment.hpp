#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdiv/train.hpp"

namespace vitdiv::cli {

/// Process exit codes shared by every subcommand.
enum ExitCode : int { kOk = 0, kUserError = 1, kRuntimeError = 2 };

/// The model and training setup of one run. The top-level "regularizers" and
/// "k_grid" keys are stored in train.regularizers and train.k_grid.
struct ExperimentConfig {
  ViTConfig model;
  TrainConfig train;
  std::string output_dir = "runs/experiment";
  /// Checkpoint period in epochs; 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 0;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Reads and validates a config file; all failures are ConfigError.
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Environment variable that relocates relative output directories.
inline constexpr const char* kOutputRootEnv = "VITDIV_OUTPUT_ROOT";

/// Relative paths are placed under $VITDIV_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output_dir(const std::string& dir);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  std::optional<std::string> out;
  std::optional<std::vector<std::size_t>> k_grid;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

/// Each command returns an ExitCode and never throws.
int cmd_train(const std::string& config_path, const Overrides& overrides, Streams io);
int cmd_analyze(const std::string& checkpoint_path, const std::string& data_path, const Overrides& overrides,
                Streams io);
int cmd_compare(const std::string& report_a, const std::string& report_b, const Overrides& overrides, Streams io);
int cmd_ablate(const std::string& config_path, const Overrides& overrides, Streams io);

/// Rows of the ablation grid in order, with the coefficients each row keeps
/// from the base configuration.
struct AblationRow {
  std::string name;
  bool mixing, within, cross, attention, weight;
};
const std::vector<AblationRow>& ablation_rows();

/// The base regularizers with the coefficients the row disables set to 0.
reg::RegularizerConfig ablation_config(const reg::RegularizerConfig& base, const AblationRow& row);

/// Layer-averaged summary of a report: embedding cosine, attention cosine and
/// the PCA error at each k of the grid.
struct LevelSummary {
  double embedding_cosine = 0;
  double attention_cosine = 0;
  std::vector<double> pca_error;
};
LevelSummary summarize(const metrics::RedundancyReport& report);

struct DeltaRow {
  std::string level, metric, layer, matrix, k;
  double a = 0, b = 0;
  double delta = 0;     // b - a
  double relative = 0;  // (b - a) / |a|, 0 when a = b = 0
};

/// Row-aligned deltas of two compatible reports; throws MetricError when the
/// layer counts, k-grids or matrix lists differ.
std::vector<DeltaRow> compare_reports(const metrics::RedundancyReport& a, const metrics::RedundancyReport& b);

}  // namespace vitdiv::cli
