#include "vitdiv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <Eigen/Dense>

namespace vitdiv::metrics {

namespace {

using json = nlohmann::json;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

ConstMap as_rows(const double* data, std::size_t rows, std::size_t cols) {
  return ConstMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMap as_rows(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw MetricError(std::string(what) + ": expected a matrix of row vectors, got " +
                      shape_str(t.shape()));
  }
  return as_rows(t.data().data(), t.dim(0), t.dim(1));
}

// Heads [H, ...] viewed as [H, m].
ConstMap as_heads(const Tensor& t, const char* what) {
  if (t.rank() < 2) {
    throw MetricError(std::string(what) + ": expected [H, ...] attention maps, got " +
                      shape_str(t.shape()));
  }
  return as_rows(t.data().data(), t.dim(0), t.numel() / t.dim(0));
}

void require_nonzero(double squared_norm, Eigen::Index index, const char* what) {
  if (!(squared_norm > 0.0)) {
    throw MetricError(std::string(what) + ": vector " + std::to_string(index) + " has zero norm");
  }
}

// |cos| as |dot| / sqrt(|a|^2 |b|^2); equals 1 exactly when a == b.
double abs_cosine(double dot, double aa, double bb) {
  return std::min(1.0, std::abs(dot) / std::sqrt(aa * bb));
}

double cosine_within_rows(const ConstMap& h, const char* what) {
  const Eigen::Index n = h.rows();
  if (n < 2) throw MetricError(std::string(what) + ": needs at least 2 vectors, got " + std::to_string(n));
  const RowMatrix gram = h * h.transpose();
  for (Eigen::Index i = 0; i < n; ++i) require_nonzero(gram(i, i), i, what);
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) total += abs_cosine(gram(i, j), gram(i, i), gram(j, j));
  return total / static_cast<double>(n * (n - 1));
}

double cosine_cross_rows(const ConstMap& a, const ConstMap& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw MetricError("cosine_cross: vector sets differ in shape");
  }
  if (a.rows() == 0) throw MetricError("cosine_cross: empty vector set");
  double total = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double aa = a.row(i).dot(a.row(i));
    const double bb = b.row(i).dot(b.row(i));
    require_nonzero(aa, i, "cosine_cross (first set)");
    require_nonzero(bb, i, "cosine_cross (second set)");
    total += abs_cosine(a.row(i).dot(b.row(i)), aa, bb);
  }
  return total / static_cast<double>(a.rows());
}

double mse_rows(const ConstMap& heads) {
  const Eigen::Index h = heads.rows();
  if (h < 2) throw MetricError("attention_mse: needs at least 2 heads, got " + std::to_string(h));
  double total = 0;
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < h; ++j)
      if (i != j) total += (heads.row(i) - heads.row(j)).squaredNorm();
  return total / static_cast<double>(h * (h - 1));
}

double std_of(const double* data, std::size_t count) {
  if (count == 0) throw MetricError("attention_std: empty map");
  double mean = 0;
  for (std::size_t i = 0; i < count; ++i) mean += data[i];
  mean /= static_cast<double>(count);
  double var = 0;
  for (std::size_t i = 0; i < count; ++i) var += (data[i] - mean) * (data[i] - mean);
  return std::sqrt(var / static_cast<double>(count));
}

}  // namespace

double cosine_within(const Tensor& h) { return cosine_within_rows(as_rows(h, "cosine_within"), "cosine_within"); }

double cosine_cross(const Tensor& a, const Tensor& b) {
  return cosine_cross_rows(as_rows(a, "cosine_cross"), as_rows(b, "cosine_cross"));
}

double attention_cosine_within(const Tensor& heads) {
  return cosine_within_rows(as_heads(heads, "attention_cosine_within"), "attention_cosine_within");
}

double attention_mse(const Tensor& heads) { return mse_rows(as_heads(heads, "attention_mse")); }

double attention_std(const Tensor& map) { return std_of(map.data().data(), map.numel()); }

std::vector<double> pca_reconstruction_errors(const Tensor& w, std::span<const std::size_t> k_grid,
                                              bool center) {
  RowMatrix m = as_rows(w, "pca_reconstruction_error");
  const auto rank_bound = static_cast<std::size_t>(std::min(m.rows(), m.cols()));
  for (std::size_t k : k_grid) {
    if (k < 1 || k > rank_bound) {
      throw MetricError("pca_reconstruction_error: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(rank_bound) + "] for a " + shape_str(w.shape()) + " matrix");
    }
  }
  if (center) m.rowwise() -= m.colwise().mean();
  const Eigen::VectorXd sigma = Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues();
  std::vector<double> out;
  out.reserve(k_grid.size());
  for (std::size_t k : k_grid) {
    // Smallest terms first; singular values arrive in decreasing order.
    double tail = 0;
    for (auto i = static_cast<Eigen::Index>(rank_bound); i-- > static_cast<Eigen::Index>(k);)
      tail += sigma(i) * sigma(i);
    out.push_back(tail);
  }
  return out;
}

double pca_reconstruction_error(const Tensor& w, std::size_t k, bool center) {
  const std::size_t grid[] = {k};
  return pca_reconstruction_errors(w, grid, center).front();
}

RedundancyReport build_report(const ViTModel& model, std::span<const ForwardTrace> traces,
                              const ReportOptions& options) {
  if (traces.empty()) throw MetricError("build_report: no sampled traces");
  const std::size_t depth = model.config().depth;
  const std::size_t heads = model.config().heads;
  std::size_t total = 0;
  for (const auto& t : traces) {
    if (t.batch == 0) throw MetricError("build_report: trace with no images");
    if (t.embeddings.size() != depth || t.attentions.size() != depth) {
      throw MetricError("build_report: trace was recorded without capture or for another depth");
    }
    total += t.batch;
  }

  RedundancyReport r;
  r.model_id = options.model_id;
  r.sample_count = total;
  r.k_grid = options.k_grid;
  r.timestamp = options.timestamp;
  r.class_token_included = options.include_class_token;
  r.pca_centered = options.center_pca;
  r.layers.resize(depth);

  for (const auto& t : traces) {
    const std::size_t tokens = t.tokens;
    const std::size_t first = options.include_class_token ? 0 : 1;
    const std::size_t width = model.config().dim;
    const double weight = static_cast<double>(t.batch) / static_cast<double>(total);
    const double* final_layer = t.embeddings[depth - 1].data().data();
    for (std::size_t l = 0; l < depth; ++l) {
      const double* emb = t.embeddings[l].data().data();
      const double* att = t.attentions[l].data().data();
      const std::size_t map_size = tokens * tokens;
      double within = 0, cross = 0, acos = 0, amse = 0, astd = 0;
      for (std::size_t b = 0; b < t.batch; ++b) {
        const std::size_t row0 = b * tokens + first;
        auto e = as_rows(emb + row0 * width, tokens - first, width);
        auto f = as_rows(final_layer + row0 * width, tokens - first, width);
        within += cosine_within_rows(e, "embedding cosine");
        cross += cosine_cross_rows(e, f);
        auto a = as_rows(att + b * heads * map_size, heads, map_size);
        acos += cosine_within_rows(a, "attention cosine");
        amse += mse_rows(a);
        double s = 0;
        for (std::size_t h = 0; h < heads; ++h) s += std_of(att + (b * heads + h) * map_size, map_size);
        astd += s / static_cast<double>(heads);
      }
      const double inv = 1.0 / static_cast<double>(t.batch);
      auto& out = r.layers[l];
      out.embedding_cosine_within += weight * (within * inv);
      out.embedding_cosine_cross_to_final += weight * (cross * inv);
      out.attention_cosine_within += weight * (acos * inv);
      out.attention_mse += weight * (amse * inv);
      out.attention_std += weight * (astd * inv);
    }
  }

  const auto mats = model.weight_matrices();
  const std::size_t per_layer = mats.size() / depth;
  for (std::size_t i = 0; i < mats.size(); ++i) {
    r.matrices.push_back({mats[i].name, i / per_layer,
                          pca_reconstruction_errors(mats[i].tensor, options.k_grid, options.center_pca)});
  }
  for (std::size_t l = 0; l < depth; ++l) {
    auto& avg = r.layers[l].pca_error;
    avg.assign(options.k_grid.size(), 0.0);
    for (std::size_t i = l * per_layer; i < (l + 1) * per_layer; ++i)
      for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += r.matrices[i].pca_error[k];
    for (auto& v : avg) v /= static_cast<double>(per_layer);
  }
  return r;
}

void to_json(json& j, const RedundancyReport& r) {
  j = json::object();
  j["metadata"] = {{"model_id", r.model_id},
                   {"sample_count", r.sample_count},
                   {"k_grid", r.k_grid},
                   {"timestamp", r.timestamp},
                   {"class_token_included", r.class_token_included},
                   {"pca_centered", r.pca_centered}};
  json emb = json::array(), att = json::array(), wt = json::array();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& L = r.layers[l];
    emb.push_back({{"layer", l},
                   {"cosine_within", L.embedding_cosine_within},
                   {"cosine_cross_to_final", L.embedding_cosine_cross_to_final}});
    att.push_back({{"layer", l},
                   {"cosine_within", L.attention_cosine_within},
                   {"mse", L.attention_mse},
                   {"std", L.attention_std}});
    json mats = json::array();
    for (const auto& m : r.matrices)
      if (m.layer == l) mats.push_back({{"name", m.name}, {"pca_error", m.pca_error}});
    wt.push_back({{"layer", l}, {"pca_error", L.pca_error}, {"matrices", mats}});
  }
  j["embedding"] = emb;
  j["attention"] = att;
  j["weight"] = wt;
}

void from_json(const json& j, RedundancyReport& r) {
  try {
    const auto& meta = j.at("metadata");
    r = RedundancyReport{};
    meta.at("model_id").get_to(r.model_id);
    meta.at("sample_count").get_to(r.sample_count);
    meta.at("k_grid").get_to(r.k_grid);
    meta.at("timestamp").get_to(r.timestamp);
    meta.at("class_token_included").get_to(r.class_token_included);
    meta.at("pca_centered").get_to(r.pca_centered);
    const auto& emb = j.at("embedding");
    const auto& att = j.at("attention");
    const auto& wt = j.at("weight");
    if (emb.size() != att.size() || emb.size() != wt.size()) {
      throw MetricError("report: levels disagree on the number of layers");
    }
    r.layers.resize(emb.size());
    for (std::size_t l = 0; l < emb.size(); ++l) {
      auto& L = r.layers[l];
      emb[l].at("cosine_within").get_to(L.embedding_cosine_within);
      emb[l].at("cosine_cross_to_final").get_to(L.embedding_cosine_cross_to_final);
      att[l].at("cosine_within").get_to(L.attention_cosine_within);
      att[l].at("mse").get_to(L.attention_mse);
      att[l].at("std").get_to(L.attention_std);
      wt[l].at("pca_error").get_to(L.pca_error);
      for (const auto& m : wt[l].at("matrices")) {
        r.matrices.push_back({m.at("name").get<std::string>(), l,
                              m.at("pca_error").get<std::vector<double>>()});
      }
    }
  } catch (const json::exception& e) {
    throw MetricError(std::string("malformed redundancy report: ") + e.what());
  }
}

std::string to_csv(const RedundancyReport& r) {
  std::string out = "level,metric,layer,matrix,k,value\n";
  char buf[64];
  auto row = [&](const char* level, const char* metric, std::size_t layer, const std::string& matrix,
                 const std::string& k, double value) {
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    out += std::string(level) + "," + metric + "," + std::to_string(layer) + "," + matrix + "," + k +
           "," + buf + "\n";
  };
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& L = r.layers[l];
    row("embedding", "cosine_within", l, "", "", L.embedding_cosine_within);
    row("embedding", "cosine_cross_to_final", l, "", "", L.embedding_cosine_cross_to_final);
    row("attention", "cosine_within", l, "", "", L.attention_cosine_within);
    row("attention", "mse", l, "", "", L.attention_mse);
    row("attention", "std", l, "", "", L.attention_std);
    for (std::size_t k = 0; k < L.pca_error.size(); ++k)
      row("weight", "pca_error", l, "", std::to_string(r.k_grid[k]), L.pca_error[k]);
  }
  for (const auto& m : r.matrices)
    for (std::size_t k = 0; k < m.pca_error.size(); ++k)
      row("weight", "pca_error", m.layer, m.name, std::to_string(r.k_grid[k]), m.pca_error[k]);
  return out;
}

}  // namespace vitdiv::metrics
