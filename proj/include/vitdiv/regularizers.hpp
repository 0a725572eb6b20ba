#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdiv/json_util.hpp"
#include "vitdiv/tensor.hpp"
#include "vitdiv/vit.hpp"

// Differentiable diversity penalties. Embedding sets are [B*T, d] with one
// block of T token rows per image; weight vectors are the columns of a
// weight matrix.

namespace vitdiv::reg {

enum class WeightVariant { MHS, MGD, CNO, SO };
enum class AttentionVariant { SO, CNO, Cosine };
enum class CrossVariant { Cosine, Contrastive };
enum class MhsMode { HardMin, SoftMin };
enum class EigenMode { PowerIteration, Exact };

NLOHMANN_JSON_SERIALIZE_ENUM(WeightVariant, {{WeightVariant::MHS, "mhs"},
                                             {WeightVariant::MGD, "mgd"},
                                             {WeightVariant::CNO, "cno"},
                                             {WeightVariant::SO, "so"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AttentionVariant, {{AttentionVariant::SO, "so"},
                                                {AttentionVariant::CNO, "cno"},
                                                {AttentionVariant::Cosine, "cosine"}})
NLOHMANN_JSON_SERIALIZE_ENUM(CrossVariant, {{CrossVariant::Cosine, "cosine"},
                                            {CrossVariant::Contrastive, "contrastive"}})
NLOHMANN_JSON_SERIALIZE_ENUM(MhsMode, {{MhsMode::HardMin, "hard-min"}, {MhsMode::SoftMin, "soft-min"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EigenMode, {{EigenMode::PowerIteration, "power-iteration"},
                                         {EigenMode::Exact, "exact"}})

struct RegularizerConfig {
  double lambda_mixing = 0;
  double lambda_weight = 0;
  double lambda_attention = 0;
  double lambda_embed_within = 0;
  double lambda_embed_cross = 0;
  WeightVariant weight_variant = WeightVariant::MHS;
  AttentionVariant attention_variant = AttentionVariant::SO;
  CrossVariant embed_cross_variant = CrossVariant::Cosine;
  EigenMode eigen_mode = EigenMode::PowerIteration;
  std::size_t power_iteration_steps = 2;
  double mgd_epsilon = 1.0;
  double mgd_jitter = 1e-6;
  MhsMode mhs_mode = MhsMode::HardMin;
  double mhs_temperature = 10.0;
  /// Probability that a patch is taken from the partner image.
  double mixing_mask_ratio = 0.5;

  void validate() const;
  /// True when any of the trace-based terms (everything but mixing) is on.
  bool trace_terms_active() const;

  bool operator==(const RegularizerConfig&) const = default;
};

void to_json(nlohmann::json& j, const RegularizerConfig& c);
/// Accepts either a preset name or an object, optionally holding "preset"
/// plus overrides.
void from_json(const nlohmann::json& j, RegularizerConfig& c);

/// Built-in coefficient sets; "toy-all-levels" is the all-level set used for
/// the small synthetic task.
RegularizerConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// --- Embedding level ------------------------------------------------------

/// Mean over images of the mean |cos| over ordered pairs of distinct tokens.
Tensor reg_embed_within(const Tensor& e, std::size_t batch = 1);
/// Mean over tokens of |cos(a_i, b_i)|.
Tensor reg_embed_cross_cosine(const Tensor& a, const Tensor& b);
/// Mean over tokens of -log softmax of the positive logit a_i.b_i against the
/// negative logit a_i.mean_{j != i} b_j, negatives drawn from the same image.
Tensor reg_embed_cross_contrastive(const Tensor& a, const Tensor& b, std::size_t batch = 1);

/// Rows of e with norm below the normalisation floor.
std::size_t count_degenerate_rows(const Tensor& e);

// --- Orthogonality --------------------------------------------------------

/// ||M^T M - I||_F^2, optionally with unit-normalised columns.
Tensor reg_so(const Tensor& m, bool normalize_columns = false);

struct ExtremeEigenpairs {
  double lambda_max = 0, lambda_min = 0;
  std::vector<double> v_max, v_min;
};

/// Extreme eigenpairs of a symmetric positive semidefinite k x k matrix.
/// Power-iteration mode returns Rayleigh quotients at the iterates, so
/// lambda_max never exceeds the true largest eigenvalue.
ExtremeEigenpairs extreme_eigenpairs(std::span<const double> gram, std::size_t k, EigenMode mode,
                                     std::size_t steps, std::uint64_t seed = 0);

/// (lambda_max(M^T M) - lambda_min(M^T M))^2 with the eigenvectors held
/// constant.
Tensor reg_cno(const Tensor& m, EigenMode mode = EigenMode::PowerIteration, std::size_t steps = 2,
               bool normalize_columns = false);

// --- Hyperspherical uniformity --------------------------------------------

inline constexpr double kAcosMargin = 1e-7;

/// Negative minimum geodesic distance between the normalised columns of w.
/// Soft-min replaces the minimum by -(1/tau) log sum exp(-tau rho).
Tensor reg_mhs(const Tensor& w, MhsMode mode = MhsMode::HardMin, double temperature = 10.0);
/// -logdet(G + jitter I), G_ij = exp(-eps^2 ||w_i - w_j||^2) on normalised columns.
Tensor reg_mgd(const Tensor& w, double epsilon = 1.0, double jitter = 1e-6);

// --- Attention level ------------------------------------------------------

/// attention [B, H, T, T]; the penalty compares the flattened heads of each
/// image and is averaged over images.
Tensor reg_attention(const Tensor& attention, const RegularizerConfig& config);

// --- Mixing ---------------------------------------------------------------

struct MixedBatch {
  Tensor patches;                 // [B*n, C*p*p]
  std::vector<int> patch_labels;  // B*n
  std::size_t batch = 0;
};

/// mask[b*n + i] set means patch i of image b comes from image partner[b].
MixedBatch mix_patches(std::span<const Tensor> images, std::span<const int> labels,
                       std::size_t patch_size, std::span<const std::size_t> partner,
                       const std::vector<bool>& mask);
/// Partners form a derangement; each patch is swapped with mask_ratio.
MixedBatch sample_mixed_batch(std::span<const Tensor> images, std::span<const int> labels,
                              std::size_t patch_size, double mask_ratio, std::mt19937_64& rng);
/// Mean per-patch cross-entropy of the patch classifier on a mixed batch.
Tensor mixing_loss(const ViTModel& model, const MixedBatch& mixed);

// --- Composition ----------------------------------------------------------

struct Term {
  std::string name;
  double coefficient = 0;
  Tensor value;  // unweighted, averaged over layers / matrices
};

struct RegularizerTerms {
  Tensor total;  // sum of coefficient * value
  std::vector<Term> breakdown;
  std::size_t degenerate_rows = 0;
};

/// Weighted trace-based penalties; terms with zero coefficient are skipped.
/// Cross-layer terms pair each non-final layer with the final layer.
RegularizerTerms apply_all(const RegularizerConfig& config, const ForwardTrace& trace,
                           const ViTModel& model);

}  // namespace vitdiv::reg
