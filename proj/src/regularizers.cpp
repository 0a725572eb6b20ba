#include "vitdiv/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

namespace vitdiv::reg {

namespace {

using json = nlohmann::json;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kNormFloor = 1e-12;

std::size_t tokens_per_image(const Tensor& e, std::size_t batch, const char* what) {
  if (e.rank() != 2 || batch == 0 || e.dim(0) % batch != 0) {
    throw ShapeError(std::string(what) + ": " + shape_str(e.shape()) + " does not split into " +
                     std::to_string(batch) + " images");
  }
  return e.dim(0) / batch;
}

// [B, 1, T, T] with `off` off the diagonal and `on` on it.
Tensor tiled_pattern(std::size_t batch, std::size_t t, double off, double on) {
  std::vector<double> v(batch * t * t, off);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < t; ++i) v[(b * t + i) * t + i] = on;
  return Tensor::from({batch, 1, t, t}, std::move(v));
}

// Unit columns of w as rows: [m, t].
Tensor unit_columns_as_rows(const Tensor& w, const char* what) {
  if (w.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(w.shape()));
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  auto d = w.data();
  for (std::size_t c = 0; c < cols; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < rows; ++r) s += d[r * cols + c] * d[r * cols + c];
    if (s == 0.0) throw NumericError(std::string(what) + ": weight vector " + std::to_string(c) + " is zero");
  }
  return row_normalize(transpose(w));
}

Tensor maybe_normalize_columns(const Tensor& m, bool normalize) {
  return normalize ? transpose(row_normalize(transpose(m), kNormFloor)) : m;
}

// grams [B, k*k]; mean over rows of (v_max^T G v_max - v_min^T G v_min)^2.
Tensor cno_of_grams(const Tensor& grams, std::size_t k, EigenMode mode, std::size_t steps) {
  const std::size_t batch = grams.dim(0);
  std::vector<double> pmax(batch * k * k), pmin(batch * k * k);
  auto g = grams.data();
  for (std::size_t b = 0; b < batch; ++b) {
    auto e = extreme_eigenpairs(g.subspan(b * k * k, k * k), k, mode, steps);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        pmax[(b * k + i) * k + j] = e.v_max[i] * e.v_max[j];
        pmin[(b * k + i) * k + j] = e.v_min[i] * e.v_min[j];
      }
  }
  Tensor lmax = sum_axis(mul(grams, Tensor::from({batch, k * k}, std::move(pmax))), 1);
  Tensor lmin = sum_axis(mul(grams, Tensor::from({batch, k * k}, std::move(pmin))), 1);
  return mean(square(sub(lmax, lmin)));
}

Tensor average(const std::vector<Tensor>& parts) {
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

void require_nonnegative(double v, const char* key) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    throw ConfigError(std::string("regularizers.") + key + " must be a finite non-negative number");
  }
}

// Rejects strings the enum table does not know (the serializer would map
// them silently to the first entry).
template <typename E>
void read_enum(const json& j, const char* key, E& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  E parsed = it->template get<E>();
  if (!it->is_string() || json(parsed) != *it) {
    throw ConfigError(std::string("invalid value for 'regularizers.") + key + "': " + it->dump());
  }
  out = parsed;
}

}  // namespace

void RegularizerConfig::validate() const {
  require_nonnegative(lambda_mixing, "lambda_mixing");
  require_nonnegative(lambda_weight, "lambda_weight");
  require_nonnegative(lambda_attention, "lambda_attention");
  require_nonnegative(lambda_embed_within, "lambda_embed_within");
  require_nonnegative(lambda_embed_cross, "lambda_embed_cross");
  if (power_iteration_steps < 1) throw ConfigError("regularizers.power_iteration_steps must be at least 1");
  if (!(mgd_epsilon > 0.0)) throw ConfigError("regularizers.mgd_epsilon must be positive");
  if (!(mgd_jitter > 0.0)) throw ConfigError("regularizers.mgd_jitter must be positive");
  if (!(mhs_temperature > 0.0)) throw ConfigError("regularizers.mhs_temperature must be positive");
  if (!(mixing_mask_ratio >= 0.0 && mixing_mask_ratio <= 1.0)) {
    throw ConfigError("regularizers.mixing_mask_ratio must lie in [0, 1]");
  }
}

bool RegularizerConfig::trace_terms_active() const {
  return lambda_weight > 0 || lambda_attention > 0 || lambda_embed_within > 0 || lambda_embed_cross > 0;
}

void to_json(json& j, const RegularizerConfig& c) {
  j = json{{"lambda_mixing", c.lambda_mixing},
           {"lambda_weight", c.lambda_weight},
           {"lambda_attention", c.lambda_attention},
           {"lambda_embed_within", c.lambda_embed_within},
           {"lambda_embed_cross", c.lambda_embed_cross},
           {"weight_variant", c.weight_variant},
           {"attention_variant", c.attention_variant},
           {"embed_cross_variant", c.embed_cross_variant},
           {"eigen_mode", c.eigen_mode},
           {"power_iteration_steps", c.power_iteration_steps},
           {"mgd_epsilon", c.mgd_epsilon},
           {"mgd_jitter", c.mgd_jitter},
           {"mhs_mode", c.mhs_mode},
           {"mhs_temperature", c.mhs_temperature},
           {"mixing_mask_ratio", c.mixing_mask_ratio}};
}

void from_json(const json& j, RegularizerConfig& c) {
  using namespace json_util;
  const char* where = "regularizers";
  if (j.is_string()) {
    c = preset(j.get<std::string>());
    return;
  }
  require_known_keys(j,
                     {"preset", "lambda_mixing", "lambda_weight", "lambda_attention",
                      "lambda_embed_within", "lambda_embed_cross", "weight_variant",
                      "attention_variant", "embed_cross_variant", "eigen_mode",
                      "power_iteration_steps", "mgd_epsilon", "mgd_jitter", "mhs_mode",
                      "mhs_temperature", "mixing_mask_ratio"},
                     where);
  c = RegularizerConfig{};
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("'regularizers.preset' must be a string");
    c = preset(j["preset"].get<std::string>());
  }
  read(j, "lambda_mixing", c.lambda_mixing, where);
  read(j, "lambda_weight", c.lambda_weight, where);
  read(j, "lambda_attention", c.lambda_attention, where);
  read(j, "lambda_embed_within", c.lambda_embed_within, where);
  read(j, "lambda_embed_cross", c.lambda_embed_cross, where);
  read_enum(j, "weight_variant", c.weight_variant);
  read_enum(j, "attention_variant", c.attention_variant);
  read_enum(j, "embed_cross_variant", c.embed_cross_variant);
  read_enum(j, "eigen_mode", c.eigen_mode);
  read(j, "power_iteration_steps", c.power_iteration_steps, where);
  read(j, "mgd_epsilon", c.mgd_epsilon, where);
  read(j, "mgd_jitter", c.mgd_jitter, where);
  read_enum(j, "mhs_mode", c.mhs_mode);
  read(j, "mhs_temperature", c.mhs_temperature, where);
  read(j, "mixing_mask_ratio", c.mixing_mask_ratio, where);
  c.validate();
}

namespace {

struct PresetRow {
  const char* name;
  double mixing, weight, attention, within, cross;
};

// Swin rows leave cross-layer embedding unset; it maps to 0.
constexpr PresetRow kPresets[] = {
    {"none", 0, 0, 0, 0, 0},
    {"vit-small", 1, 5e-4, 1e-4, 0.5, 0.5},
    {"vit-base", 1, 5e-5, 1e-5, 0.5, 0.5},
    {"deit-small", 1, 5e-4, 1e-4, 0.5, 0.5},
    {"deit-small24", 1, 5e-4, 1e-4, 0.5, 0.5},
    {"deit-base", 1, 1e-6, 5e-6, 0.5, 0.5},
    {"swin-small", 1e-3, 1e-6, 1e-3, 0.9, 0},
    {"swin-base", 1, 1e-6, 1e-3, 0.5, 0},
    {"toy-all-levels", 1, 1e-2, 1e-1, 2, 0.5},
};

}  // namespace

RegularizerConfig preset(const std::string& name) {
  for (const auto& p : kPresets) {
    if (name == p.name) {
      RegularizerConfig c;
      c.lambda_mixing = p.mixing;
      c.lambda_weight = p.weight;
      c.lambda_attention = p.attention;
      c.lambda_embed_within = p.within;
      c.lambda_embed_cross = p.cross;
      return c;
    }
  }
  std::string known;
  for (const auto& p : kPresets) known += std::string(known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown regularizer preset '" + name + "' (known: " + known + ")");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : kPresets) out.emplace_back(p.name);
  return out;
}

Tensor reg_embed_within(const Tensor& e, std::size_t batch) {
  const std::size_t t = tokens_per_image(e, batch, "reg_embed_within");
  if (t < 2) throw ShapeError("reg_embed_within: needs at least 2 tokens per image");
  Tensor u = row_normalize(e, kNormFloor);
  Tensor cosines = abs(attention_logits(u, u, batch, 1, 1.0));
  const double w = 1.0 / static_cast<double>(batch * t * (t - 1));
  return sum(mul(cosines, tiled_pattern(batch, t, w, 0.0)));
}

Tensor reg_embed_cross_cosine(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw ShapeError("reg_embed_cross_cosine: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return mean(abs(sum_axis(mul(row_normalize(a, kNormFloor), row_normalize(b, kNormFloor)), 1)));
}

Tensor reg_embed_cross_contrastive(const Tensor& a, const Tensor& b, std::size_t batch) {
  if (a.shape() != b.shape()) {
    throw ShapeError("reg_embed_cross_contrastive: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t t = tokens_per_image(a, batch, "reg_embed_cross_contrastive");
  if (t < 2) throw ShapeError("reg_embed_cross_contrastive: needs at least 2 tokens per image");
  Tensor positive = sum_axis(mul(a, b), 1);
  Tensor others = attention_mix(tiled_pattern(batch, t, 1.0 / static_cast<double>(t - 1), 0.0), b);
  Tensor negative = sum_axis(mul(a, others), 1);
  return mean(softplus(sub(negative, positive)));
}

std::size_t count_degenerate_rows(const Tensor& e) {
  const std::size_t cols = e.dim(e.rank() - 1);
  auto d = e.data();
  std::size_t count = 0;
  for (std::size_t r = 0; r < e.numel() / cols; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += d[r * cols + c] * d[r * cols + c];
    if (std::sqrt(s) < kNormFloor) ++count;
  }
  return count;
}

Tensor reg_so(const Tensor& m, bool normalize_columns) {
  if (m.rank() != 2 || m.numel() == 0) throw ShapeError("reg_so: expected a nonempty matrix");
  Tensor mm = maybe_normalize_columns(m, normalize_columns);
  Tensor gram = matmul(transpose(mm), mm);
  return sum(square(sub(gram, Tensor::eye(m.dim(1)))));
}

ExtremeEigenpairs extreme_eigenpairs(std::span<const double> gram, std::size_t k, EigenMode mode,
                                     std::size_t steps, std::uint64_t seed) {
  if (gram.size() != k * k || k == 0) throw ShapeError("extreme_eigenpairs: size mismatch");
  Eigen::Map<const RowMatrix> g(gram.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  ExtremeEigenpairs out;
  auto to_vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  if (mode == EigenMode::Exact) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(g);
    if (solver.info() != Eigen::Success) throw NumericError("extreme_eigenpairs: eigensolver failed");
    out.lambda_min = solver.eigenvalues()(0);
    out.lambda_max = solver.eigenvalues()(static_cast<Eigen::Index>(k) - 1);
    out.v_min = to_vec(solver.eigenvectors().col(0));
    out.v_max = to_vec(solver.eigenvectors().col(static_cast<Eigen::Index>(k) - 1));
    return out;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto start = [&] {
    Eigen::VectorXd v(static_cast<Eigen::Index>(k));
    for (auto& x : v) x = normal(rng);
    return Eigen::VectorXd(v.normalized());
  };
  auto iterate = [&](const Eigen::MatrixXd& a) {
    Eigen::VectorXd v = start();
    for (std::size_t s = 0; s < steps; ++s) {
      Eigen::VectorXd next = a * v;
      const double n = next.norm();
      if (n == 0.0) break;
      v = next / n;
    }
    return v;
  };
  const Eigen::VectorXd v1 = iterate(g);
  out.lambda_max = v1.dot(g * v1);
  const Eigen::MatrixXd shifted =
      out.lambda_max * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) - g;
  const Eigen::VectorXd v2 = iterate(shifted);
  out.lambda_min = v2.dot(g * v2);
  out.v_max = to_vec(v1);
  out.v_min = to_vec(v2);
  return out;
}

Tensor reg_cno(const Tensor& m, EigenMode mode, std::size_t steps, bool normalize_columns) {
  if (m.rank() != 2 || m.numel() == 0) throw ShapeError("reg_cno: expected a nonempty matrix");
  Tensor mm = maybe_normalize_columns(m, normalize_columns);
  const std::size_t k = m.dim(1);
  return cno_of_grams(reshape(matmul(transpose(mm), mm), {1, k * k}), k, mode, steps);
}

Tensor reg_mhs(const Tensor& w, MhsMode mode, double temperature) {
  if (w.rank() != 2 || w.dim(1) < 2) throw ShapeError("reg_mhs: needs at least 2 weight vectors");
  Tensor v = unit_columns_as_rows(w, "reg_mhs");
  const std::size_t m = v.dim(0);
  Tensor cosines = reshape(matmul(v, transpose(v)), {m * m, 1});
  std::vector<std::size_t> pairs;
  if (mode == MhsMode::HardMin) {
    // The closest pair has the largest cosine.
    auto c = cosines.data();
    std::size_t best = 1;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j)
        if (c[i * m + j] > c[best]) best = i * m + j;
    pairs.push_back(best);
    return neg(sum(acos_bounded_slope(gather_rows(cosines, pairs), kAcosMargin)));
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) pairs.push_back(i * m + j);
  Tensor rho = acos_bounded_slope(gather_rows(cosines, pairs), kAcosMargin);
  return scale(logsumexp(scale(rho, -temperature)), 1.0 / temperature);
}

Tensor reg_mgd(const Tensor& w, double epsilon, double jitter) {
  if (w.rank() != 2 || w.dim(1) < 1) throw ShapeError("reg_mgd: needs at least 1 weight vector");
  Tensor v = unit_columns_as_rows(w, "reg_mgd");
  const std::size_t m = v.dim(0);
  // ||u - v||^2 = 2 - 2 u.v on the unit sphere.
  Tensor kernel = exp(scale(add_scalar(matmul(v, transpose(v)), -1.0), 2.0 * epsilon * epsilon));
  if (jitter > 0.0) kernel = add(kernel, scale(Tensor::eye(m), jitter));
  return neg(logdet_spd(kernel));
}

Tensor reg_attention(const Tensor& attention, const RegularizerConfig& config) {
  if (attention.rank() != 4) {
    throw ShapeError("reg_attention: expected [B, H, T, T], got " + shape_str(attention.shape()));
  }
  const std::size_t batch = attention.dim(0), heads = attention.dim(1);
  const std::size_t flat = attention.dim(2) * attention.dim(3);
  Tensor rows = reshape(attention, {batch * heads, flat});
  if (config.attention_variant == AttentionVariant::Cosine) return reg_embed_within(rows, batch);
  Tensor u = row_normalize(rows, kNormFloor);
  Tensor grams = attention_logits(u, u, batch, 1, 1.0);  // [B, 1, H, H]
  if (config.attention_variant == AttentionVariant::SO) {
    return scale(sum(square(sub(grams, tiled_pattern(batch, heads, 0.0, 1.0)))),
                 1.0 / static_cast<double>(batch));
  }
  return cno_of_grams(reshape(grams, {batch, heads * heads}), heads, config.eigen_mode,
                      config.power_iteration_steps);
}

MixedBatch mix_patches(std::span<const Tensor> images, std::span<const int> labels, std::size_t patch_size,
                       std::span<const std::size_t> partner, const std::vector<bool>& mask) {
  const std::size_t batch = images.size();
  if (batch < 2) throw ShapeError("mixing: needs at least 2 images, got " + std::to_string(batch));
  if (labels.size() != batch || partner.size() != batch) {
    throw ShapeError("mixing: images, labels and partners differ in count");
  }
  std::vector<Tensor> patches;
  for (const auto& img : images) patches.push_back(patchify(img.detach(), patch_size));
  const std::size_t n = patches[0].dim(0), width = patches[0].dim(1);
  if (mask.size() != batch * n) throw ShapeError("mixing: mask size differs from batch * patches");
  MixedBatch out;
  out.batch = batch;
  std::vector<double> values(batch * n * width);
  out.patch_labels.resize(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    if (partner[b] >= batch) throw ShapeError("mixing: partner index out of range");
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = mask[b * n + i] ? partner[b] : b;
      auto row = patches[src].data().subspan(i * width, width);
      std::copy(row.begin(), row.end(), values.begin() + static_cast<std::ptrdiff_t>((b * n + i) * width));
      out.patch_labels[b * n + i] = labels[src];
    }
  }
  out.patches = Tensor::from({batch * n, width}, std::move(values));
  return out;
}

MixedBatch sample_mixed_batch(std::span<const Tensor> images, std::span<const int> labels,
                              std::size_t patch_size, double mask_ratio, std::mt19937_64& rng) {
  const std::size_t batch = images.size();
  if (batch < 2) throw ShapeError("mixing: needs at least 2 images, got " + std::to_string(batch));
  std::vector<std::size_t> order(batch);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  // Each image is paired with the next one in a random cycle, never itself.
  std::vector<std::size_t> partner(batch);
  for (std::size_t i = 0; i < batch; ++i) partner[order[i]] = order[(i + 1) % batch];
  const std::size_t n = (images[0].dim(1) / patch_size) * (images[0].dim(2) / patch_size);
  std::bernoulli_distribution take(mask_ratio);
  std::vector<bool> mask(batch * n);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = take(rng);
  return mix_patches(images, labels, patch_size, partner, mask);
}

Tensor mixing_loss(const ViTModel& model, const MixedBatch& mixed) {
  if (!model.config().patch_classifier) throw ConfigError("mixing loss needs model.patch_classifier = true");
  auto trace = forward_patches(model, mixed.patches, mixed.batch, false);
  return cross_entropy(*trace.patch_logits, mixed.patch_labels);
}

RegularizerTerms apply_all(const RegularizerConfig& config, const ForwardTrace& trace, const ViTModel& model) {
  RegularizerTerms out;
  out.total = Tensor::scalar(0.0);
  if (!config.trace_terms_active()) return out;
  const std::size_t depth = trace.embeddings.size();
  if (depth == 0 || trace.attentions.size() != depth) {
    throw ShapeError("apply_all: the trace was recorded without capture");
  }
  auto add_term = [&](const char* name, double coefficient, Tensor value) {
    out.total = add(out.total, scale(value, coefficient));
    out.breakdown.push_back({name, coefficient, std::move(value)});
  };

  if (config.lambda_embed_within > 0 || config.lambda_embed_cross > 0) {
    for (const auto& e : trace.embeddings) out.degenerate_rows += count_degenerate_rows(e);
  }
  if (config.lambda_embed_within > 0) {
    std::vector<Tensor> parts;
    for (const auto& e : trace.embeddings) parts.push_back(reg_embed_within(e, trace.batch));
    add_term("embed_within", config.lambda_embed_within, average(parts));
  }
  if (config.lambda_embed_cross > 0 && depth >= 2) {
    const Tensor& last = trace.embeddings.back();
    std::vector<Tensor> parts;
    for (std::size_t l = 0; l + 1 < depth; ++l) {
      parts.push_back(config.embed_cross_variant == CrossVariant::Cosine
                          ? reg_embed_cross_cosine(trace.embeddings[l], last)
                          : reg_embed_cross_contrastive(trace.embeddings[l], last, trace.batch));
    }
    add_term("embed_cross", config.lambda_embed_cross, average(parts));
  }
  if (config.lambda_attention > 0) {
    std::vector<Tensor> parts;
    for (const auto& a : trace.attentions) parts.push_back(reg_attention(a, config));
    add_term("attention", config.lambda_attention, average(parts));
  }
  if (config.lambda_weight > 0) {
    std::vector<Tensor> parts;
    for (const auto& w : model.weight_matrices()) {
      switch (config.weight_variant) {
        case WeightVariant::MHS:
          parts.push_back(reg_mhs(w.tensor, config.mhs_mode, config.mhs_temperature));
          break;
        case WeightVariant::MGD:
          parts.push_back(reg_mgd(w.tensor, config.mgd_epsilon, config.mgd_jitter));
          break;
        case WeightVariant::CNO:
          parts.push_back(reg_cno(w.tensor, config.eigen_mode, config.power_iteration_steps));
          break;
        case WeightVariant::SO:
          parts.push_back(reg_so(w.tensor));
          break;
      }
    }
    add_term("weight", config.lambda_weight, average(parts));
  }
  return out;
}

}  // namespace vitdiv::reg
