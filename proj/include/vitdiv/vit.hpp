#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdiv/json_util.hpp"
#include "vitdiv/tensor.hpp"

namespace vitdiv {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t depth = 2;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t num_classes = 10;
  /// Attention logit scale; 1/sqrt(head_dim) when unset.
  std::optional<double> alpha;
  /// Enables the shared per-patch classifier used by the mixing loss.
  bool patch_classifier = true;
  double init_std = 0.02;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t ffn_dim() const { return dim * ffn_mult; }
  double attention_scale() const;

  bool operator==(const ViTConfig&) const = default;
};

void to_json(nlohmann::json& j, const ViTConfig& c);
void from_json(const nlohmann::json& j, ViTConfig& c);

/// Parameters of one pre-norm transformer block. Weight matrices are stored
/// as [in, out] and applied as x * W, so each column is one output unit.
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Everything captured by a forward pass over a batch of B images of T tokens.
struct ForwardTrace {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  /// Per layer: block outputs e^l, shape [B*T, d]; class token first per image.
  std::vector<Tensor> embeddings;
  /// Per layer: row-stochastic attention maps, shape [B, H, T, T].
  std::vector<Tensor> attentions;
  /// [B, num_classes].
  Tensor class_logits;
  /// [B*n, num_classes], present when the patch classifier is enabled.
  std::optional<Tensor> patch_logits;

  /// e^l of one image, [T, d].
  Tensor embedding(std::size_t layer, std::size_t image) const;
  /// Attention maps of one image, [H, T, T].
  Tensor attention(std::size_t layer, std::size_t image) const;
};

class ViTModel {
 public:
  ViTModel(const ViTConfig& config, std::uint64_t seed);

  const ViTConfig& config() const { return config_; }

  /// All trainable tensors in a fixed order with stable names.
  std::vector<NamedTensor> parameters() const;
  /// The 6 * depth projection matrices: per layer W_Q, W_K, W_V, W_O, W_1, W_2.
  std::vector<NamedTensor> weight_matrices() const;

  const std::vector<BlockParams>& blocks() const { return blocks_; }
  std::vector<BlockParams>& blocks() { return blocks_; }

  Tensor patch_weight, patch_bias;
  Tensor class_token;  // [1, d]
  Tensor positions;    // [T, d]
  Tensor final_gain, final_bias;
  Tensor head_weight, head_bias;
  Tensor patch_head_weight, patch_head_bias;

  /// Replaces parameter values by name; shapes must match exactly.
  void load_parameters(const std::map<std::string, Tensor>& values);

 private:
  ViTConfig config_;
  std::vector<BlockParams> blocks_;
};

/// Splits a [C, H, W] image into raster-ordered patches, one flattened
/// (channel, row, column) patch per output row: [n, C*p*p].
Tensor patchify(const Tensor& image, std::size_t patch_size);

/// Stacks patchified images into [B*n, C*p*p].
Tensor patchify_batch(std::span<const Tensor> images, std::size_t patch_size);

struct AttentionOutput {
  Tensor output;      // x + attention branch, [B*T, d]
  Tensor attentions;  // [B, H, T, T]
};

/// Pre-norm multi-head self-attention sublayer with residual connection:
/// y = x + concat_h(A_h V_h) W_O + b_O with A_h = softmax(alpha Q_h K_h^T),
/// where Q, K, V are projections of layernorm(x).
AttentionOutput attention_forward(const Tensor& x, const BlockParams& block, std::size_t batch,
                                  std::size_t heads, double alpha);

/// Runs the model on pre-patchified input [B*n, C*p*p]. With capture=false the
/// embedding/attention vectors of the trace stay empty.
ForwardTrace forward_patches(const ViTModel& model, const Tensor& patches, std::size_t batch,
                             bool capture);

ForwardTrace forward(const ViTModel& model, std::span<const Tensor> images, bool capture);

/// Alias of ViTModel::weight_matrices() kept for call sites that read better
/// as a free function.
inline std::vector<NamedTensor> enumerate_weight_matrices(const ViTModel& model) {
  return model.weight_matrices();
}

// ---------------------------------------------------------------------------
// Checkpoints. Layout (all integers little-endian):
//   bytes 0..7   magic "VITDIVCK"
//   bytes 8..11  uint32 format version (1)
//   bytes 12..19 uint64 header length N
//   next N bytes UTF-8 JSON header:
//                {"version":1,"config":{...},"metadata":{...},
//                 "tensors":[{"name":..,"shape":[..],"offset":..,"count":..}]}
//   payload      float64 little-endian values; offsets are byte offsets from
//                the start of the payload.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ViTConfig config;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const ViTModel& model,
                const nlohmann::json& metadata = nlohmann::json::object());
ViTModel load_model(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

}  // namespace vitdiv
