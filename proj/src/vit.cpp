#include "vitdiv/vit.hpp"

#include <cmath>
#include <numeric>

namespace vitdiv {

namespace {

using json = nlohmann::json;

Tensor truncated_normal(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    double z;
    do {
      z = dist(rng);
    } while (std::abs(z) > 2.0);
    x = z * stddev;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

}  // namespace

void ViTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
  if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (depth == 0) fail("depth must be positive");
  if (heads == 0 || dim == 0) fail("dim and heads must be positive");
  if (dim % heads != 0) {
    fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (channels == 0 || ffn_mult == 0) fail("channels and ffn_mult must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (alpha && !(*alpha > 0.0)) fail("alpha must be positive");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

double ViTConfig::attention_scale() const {
  return alpha ? *alpha : 1.0 / std::sqrt(static_cast<double>(head_dim()));
}

void to_json(json& j, const ViTConfig& c) {
  j = json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
           {"channels", c.channels},     {"depth", c.depth},
           {"dim", c.dim},               {"heads", c.heads},
           {"ffn_mult", c.ffn_mult},     {"num_classes", c.num_classes},
           {"patch_classifier", c.patch_classifier}, {"init_std", c.init_std}};
  j["alpha"] = c.alpha ? json(*c.alpha) : json(nullptr);
}

void from_json(const json& j, ViTConfig& c) {
  using namespace json_util;
  const char* where = "model";
  require_known_keys(j,
                     {"image_size", "patch_size", "channels", "depth", "dim", "heads", "ffn_mult",
                      "num_classes", "alpha", "patch_classifier", "init_std"},
                     where);
  read(j, "image_size", c.image_size, where);
  read(j, "patch_size", c.patch_size, where);
  read(j, "channels", c.channels, where);
  read(j, "depth", c.depth, where);
  read(j, "dim", c.dim, where);
  read(j, "heads", c.heads, where);
  read(j, "ffn_mult", c.ffn_mult, where);
  read(j, "num_classes", c.num_classes, where);
  read(j, "patch_classifier", c.patch_classifier, where);
  read(j, "init_std", c.init_std, where);
  if (j.contains("alpha") && !j["alpha"].is_null()) {
    double a = 0.0;
    read(j, "alpha", a, where);
    c.alpha = a;
  } else {
    c.alpha.reset();
  }
}

ViTModel::ViTModel(const ViTConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.dim, f = config_.ffn_dim(), c = config_.num_classes;
  const double sd = config_.init_std;
  patch_weight = truncated_normal({config_.patch_dim(), d}, rng, sd);
  patch_bias = zeros_param({d});
  class_token = truncated_normal({1, d}, rng, sd);
  positions = truncated_normal({config_.tokens(), d}, rng, sd);
  blocks_.resize(config_.depth);
  for (auto& b : blocks_) {
    b.ln1_gain = ones_param({d});
    b.ln1_bias = zeros_param({d});
    b.wq = truncated_normal({d, d}, rng, sd);
    b.bq = zeros_param({d});
    b.wk = truncated_normal({d, d}, rng, sd);
    b.bk = zeros_param({d});
    b.wv = truncated_normal({d, d}, rng, sd);
    b.bv = zeros_param({d});
    b.wo = truncated_normal({d, d}, rng, sd);
    b.bo = zeros_param({d});
    b.ln2_gain = ones_param({d});
    b.ln2_bias = zeros_param({d});
    b.w1 = truncated_normal({d, f}, rng, sd);
    b.b1 = zeros_param({f});
    b.w2 = truncated_normal({f, d}, rng, sd);
    b.b2 = zeros_param({d});
  }
  final_gain = ones_param({d});
  final_bias = zeros_param({d});
  head_weight = truncated_normal({d, c}, rng, sd);
  head_bias = zeros_param({c});
  if (config_.patch_classifier) {
    patch_head_weight = truncated_normal({d, c}, rng, sd);
    patch_head_bias = zeros_param({c});
  }
}

std::vector<NamedTensor> ViTModel::parameters() const {
  std::vector<NamedTensor> out{
      {"patch.weight", patch_weight},
      {"patch.bias", patch_bias},
      {"cls_token", class_token},
      {"pos_embed", positions},
  };
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    out.push_back({p + "attn.wq", b.wq});
    out.push_back({p + "attn.bq", b.bq});
    out.push_back({p + "attn.wk", b.wk});
    out.push_back({p + "attn.bk", b.bk});
    out.push_back({p + "attn.wv", b.wv});
    out.push_back({p + "attn.bv", b.bv});
    out.push_back({p + "attn.wo", b.wo});
    out.push_back({p + "attn.bo", b.bo});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    out.push_back({p + "ffn.w1", b.w1});
    out.push_back({p + "ffn.b1", b.b1});
    out.push_back({p + "ffn.w2", b.w2});
    out.push_back({p + "ffn.b2", b.b2});
  }
  out.push_back({"norm.gain", final_gain});
  out.push_back({"norm.bias", final_bias});
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  if (config_.patch_classifier) {
    out.push_back({"patch_head.weight", patch_head_weight});
    out.push_back({"patch_head.bias", patch_head_bias});
  }
  return out;
}

std::vector<NamedTensor> ViTModel::weight_matrices() const {
  std::vector<NamedTensor> out;
  out.reserve(6 * blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "attn.wq", b.wq});
    out.push_back({p + "attn.wk", b.wk});
    out.push_back({p + "attn.wv", b.wv});
    out.push_back({p + "attn.wo", b.wo});
    out.push_back({p + "ffn.w1", b.w1});
    out.push_back({p + "ffn.w2", b.w2});
  }
  return out;
}

void ViTModel::load_parameters(const std::map<std::string, Tensor>& values) {
  for (auto& [name, current] : parameters()) {
    auto it = values.find(name);
    if (it == values.end()) throw CheckpointError("missing parameter '" + name + "'");
    if (it->second.shape() != current.shape()) {
      throw CheckpointError("parameter '" + name + "' has shape " +
                            shape_str(it->second.shape()) + ", expected " +
                            shape_str(current.shape()));
    }
    // Parameters are leaves; overwrite their storage in place so that every
    // handle (blocks_, public members) sees the new values.
    Tensor handle = current;
    auto dst = handle.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor ForwardTrace::embedding(std::size_t layer, std::size_t image) const {
  return slice_rows(embeddings.at(layer), image * tokens, (image + 1) * tokens);
}

Tensor ForwardTrace::attention(std::size_t layer, std::size_t image) const {
  return select(attentions.at(layer), image);
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3) throw ShapeError("patchify: expected [C, H, W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), p = patch_size;
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("patchify: image " + shape_str(image.shape()) +
                     " is not divisible into patches of " + std::to_string(p));
  }
  const std::size_t gh = h / p, gw = w / p, pd = c * p * p;
  auto src = image.data();
  std::vector<double> out(gh * gw * pd);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* row = out.data() + (gy * gw + gx) * pd;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            row[(ch * p + y) * p + x] = src[(ch * h + gy * p + y) * w + gx * p + x];
    }
  return Tensor::from({gh * gw, pd}, std::move(out));
}

Tensor patchify_batch(std::span<const Tensor> images, std::size_t patch_size) {
  std::vector<Tensor> parts;
  parts.reserve(images.size());
  for (const auto& img : images) parts.push_back(patchify(img, patch_size));
  NoGradGuard guard;
  return concat_rows(parts);
}

AttentionOutput attention_forward(const Tensor& x, const BlockParams& block, std::size_t batch,
                                  std::size_t heads, double alpha) {
  if (x.rank() != 2 || x.dim(1) != block.wq.dim(0)) {
    throw ShapeError("attention_forward: input " + shape_str(x.shape()) +
                     " does not match model width " + std::to_string(block.wq.dim(0)));
  }
  Tensor h = layernorm(x, block.ln1_gain, block.ln1_bias);
  Tensor q = linear(h, block.wq, block.bq);
  Tensor k = linear(h, block.wk, block.bk);
  Tensor v = linear(h, block.wv, block.bv);
  Tensor attn = softmax(attention_logits(q, k, batch, heads, alpha), 3);
  Tensor mixed = linear(attention_mix(attn, v), block.wo, block.bo);
  return {add(x, mixed), attn};
}

ForwardTrace forward_patches(const ViTModel& model, const Tensor& patches, std::size_t batch,
                             bool capture) {
  const auto& cfg = model.config();
  const std::size_t n = cfg.num_patches(), tokens = cfg.tokens();
  if (batch == 0 || patches.rank() != 2 || patches.dim(0) != batch * n ||
      patches.dim(1) != cfg.patch_dim()) {
    throw ShapeError("forward: patches " + shape_str(patches.shape()) + " do not match " +
                     std::to_string(batch) + " images of " + std::to_string(n) + " patches x " +
                     std::to_string(cfg.patch_dim()));
  }
  ForwardTrace trace;
  trace.batch = batch;
  trace.tokens = tokens;

  Tensor projected = linear(patches, model.patch_weight, model.patch_bias);
  std::vector<Tensor> pieces{model.class_token, projected};
  Tensor stacked = concat_rows(pieces);  // row 0 = class token, rows 1.. = patches
  std::vector<std::size_t> order(batch * tokens), pos_index(batch * tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    order[b * tokens] = 0;
    for (std::size_t i = 0; i < n; ++i) order[b * tokens + 1 + i] = 1 + b * n + i;
    for (std::size_t t = 0; t < tokens; ++t) pos_index[b * tokens + t] = t;
  }
  Tensor x = add(gather_rows(stacked, order), gather_rows(model.positions, pos_index));

  for (const auto& block : model.blocks()) {
    auto att = attention_forward(x, block, batch, cfg.heads, cfg.attention_scale());
    Tensor h = layernorm(att.output, block.ln2_gain, block.ln2_bias);
    Tensor ff = linear(gelu(linear(h, block.w1, block.b1)), block.w2, block.b2);
    x = add(att.output, ff);
    if (capture) {
      trace.embeddings.push_back(x);
      trace.attentions.push_back(att.attentions);
    }
  }

  Tensor final = layernorm(x, model.final_gain, model.final_bias);
  std::vector<std::size_t> cls_rows(batch), patch_rows;
  patch_rows.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    cls_rows[b] = b * tokens;
    for (std::size_t i = 0; i < n; ++i) patch_rows.push_back(b * tokens + 1 + i);
  }
  trace.class_logits = linear(gather_rows(final, cls_rows), model.head_weight, model.head_bias);
  if (cfg.patch_classifier) {
    trace.patch_logits =
        linear(gather_rows(final, patch_rows), model.patch_head_weight, model.patch_head_bias);
  }
  return trace;
}

ForwardTrace forward(const ViTModel& model, std::span<const Tensor> images, bool capture) {
  const auto& cfg = model.config();
  for (const auto& img : images) {
    if (img.shape() != Shape{cfg.channels, cfg.image_size, cfg.image_size}) {
      throw ShapeError("forward: image " + shape_str(img.shape()) + " does not match model input " +
                       shape_str({cfg.channels, cfg.image_size, cfg.image_size}));
    }
  }
  return forward_patches(model, patchify_batch(images, cfg.patch_size), images.size(), capture);
}

}  // namespace vitdiv
