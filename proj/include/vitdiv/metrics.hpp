#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdiv/tensor.hpp"
#include "vitdiv/vit.hpp"

// Redundancy measurements on detached values. Vector sets are passed as
// matrices whose rows are the vectors; attention heads as [H, ...] tensors
// whose leading axis indexes the head.

namespace vitdiv::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean |cos| over ordered pairs of distinct rows of h [n, d].
double cosine_within(const Tensor& h);

/// Mean over i of |cos(a_i, b_i)| for row-aligned a, b [n, d].
double cosine_cross(const Tensor& a, const Tensor& b);

/// cosine_within over the flattened heads of [H, ...].
double attention_cosine_within(const Tensor& heads);

/// Mean squared Frobenius distance over ordered pairs of heads of [H, ...].
double attention_mse(const Tensor& heads);

/// Population standard deviation over all elements of one map.
double attention_std(const Tensor& map);

/// ||W - W_k||_F^2 for the rank-k truncated SVD W_k of w [r, c]; with center
/// set, column means are removed first.
double pca_reconstruction_error(const Tensor& w, std::size_t k, bool center = false);

/// pca_reconstruction_error for every k in k_grid from a single SVD.
std::vector<double> pca_reconstruction_errors(const Tensor& w, std::span<const std::size_t> k_grid,
                                              bool center = false);

struct ReportOptions {
  std::vector<std::size_t> k_grid;
  bool include_class_token = true;
  bool center_pca = false;
  std::string model_id;
  /// Copied verbatim into the report; empty keeps reports reproducible.
  std::string timestamp;
};

struct LayerRedundancy {
  double embedding_cosine_within = 0;
  double embedding_cosine_cross_to_final = 0;
  double attention_cosine_within = 0;
  double attention_mse = 0;
  /// Mean over heads of the per-head element standard deviation.
  double attention_std = 0;
  /// Mean over the layer's weight matrices, aligned with k_grid.
  std::vector<double> pca_error;

  bool operator==(const LayerRedundancy&) const = default;
};

struct MatrixRedundancy {
  std::string name;
  std::size_t layer = 0;
  std::vector<double> pca_error;

  bool operator==(const MatrixRedundancy&) const = default;
};

struct RedundancyReport {
  std::string model_id;
  std::size_t sample_count = 0;
  std::vector<std::size_t> k_grid;
  std::string timestamp;
  bool class_token_included = true;
  bool pca_centered = false;
  std::vector<LayerRedundancy> layers;
  std::vector<MatrixRedundancy> matrices;

  bool operator==(const RedundancyReport&) const = default;
};

/// Averages per-image metrics over every image of every trace. Traces must
/// carry captured embeddings and attentions.
RedundancyReport build_report(const ViTModel& model, std::span<const ForwardTrace> traces,
                              const ReportOptions& options);

void to_json(nlohmann::json& j, const RedundancyReport& r);
void from_json(const nlohmann::json& j, RedundancyReport& r);

/// Columns: level,metric,layer,matrix,k,value.
std::string to_csv(const RedundancyReport& r);

}  // namespace vitdiv::metrics
