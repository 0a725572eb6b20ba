#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdiv/data.hpp"
#include "vitdiv/metrics.hpp"
#include "vitdiv/regularizers.hpp"
#include "vitdiv/vit.hpp"

namespace vitdiv {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 1e-3;
  std::size_t warmup_epochs = 2;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
  DatasetSpec data;
  reg::RegularizerConfig regularizers;
  /// Redundancy snapshot period in epochs; the final epoch always gets one.
  std::size_t eval_every = 5;
  /// Images per capture forward when building snapshots.
  std::size_t metric_sample_size = 64;
  std::vector<std::size_t> k_grid;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Serialises everything except `regularizers`, which lives at the top level
/// of an experiment config.
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// --- Optimisation ---------------------------------------------------------

/// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
/// at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr);

struct AdamWHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m, v;
};

/// One AdamW update of a single tensor: param *= 1 - lr*wd, then the
/// bias-corrected Adam step. step is 1-based.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& state, std::size_t step,
                double lr, double weight_decay, const AdamWHyper& hyper);

/// AdamW over all model parameters; weight decay applies to rank-2 tensors.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWHyper hyper, double weight_decay);
  void step(double lr);
  std::size_t steps_taken() const { return step_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<AdamMoments> state_;
  AdamWHyper hyper_;
  double weight_decay_;
  std::size_t step_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

// --- Loss -----------------------------------------------------------------

struct LossParts {
  Tensor total;
  Tensor classification;
  /// Weighted terms in log order: mixing first, then the trace terms.
  std::vector<std::pair<std::string, Tensor>> weighted;
};

/// cross-entropy + lambda_mixing * mixing + the already weighted trace terms.
LossParts compose_loss(const Tensor& class_logits, std::span<const int> labels, const reg::RegularizerTerms& terms,
                       const std::optional<Tensor>& mixing, const reg::RegularizerConfig& config);

// --- Loops ----------------------------------------------------------------

struct TermRecord {
  std::string name;
  double coefficient = 0;
  /// Epoch mean of coefficient * term.
  double weighted = 0;
  bool operator==(const TermRecord&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;
  double classification = 0;
  std::vector<TermRecord> regularizers;  // empty when every coefficient is 0
  double train_accuracy = 0;
  double test_accuracy = 0;
  /// Learning rate of the epoch's first update.
  double lr = 0;
  std::size_t degenerate_rows = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct Snapshot {
  std::size_t epoch = 0;
  metrics::RedundancyReport report;
  bool operator==(const Snapshot&) const = default;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<Snapshot> snapshots;
  bool operator==(const TrainLog&) const = default;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

/// One JSON object per epoch, newline-terminated.
std::string to_jsonl(const TrainLog& log);
std::vector<EpochRecord> parse_jsonl(const std::string& text);
/// Columns: epoch,loss,classification,<term>...,train_accuracy,test_accuracy,lr.
std::string to_csv(const TrainLog& log);

/// Top-1 accuracy without regularizers; ties resolve to the lowest class.
double evaluate(const ViTModel& model, const Dataset& data, std::size_t chunk = 128);

/// Redundancy report of the model on a dataset, forwarded in chunks.
metrics::RedundancyReport probe_report(const ViTModel& model, const Dataset& probe,
                                       const metrics::ReportOptions& options, std::size_t chunk = 64);

struct TrainCallbacks {
  /// Called after every completed epoch with the new record.
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const Snapshot&)> on_snapshot;
};

TrainLog train(ViTModel& model, const TrainConfig& config, const DataSplits& data,
               const TrainCallbacks& callbacks = {});

/// Default k-grid: d/8, d/4, d/2 and d, deduplicated, all >= 1.
std::vector<std::size_t> default_k_grid(std::size_t dim);

}  // namespace vitdiv
