#include "experiment.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "vitdiv/json_util.hpp"

namespace vitdiv::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Runtime failures, as opposed to user/config errors.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw RuntimeFailure("cannot write '" + path.string() + "'");
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// Creates the directory and probes that a file can be written into it.
fs::path prepare_output(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto probe = dir / ".write-probe";
  std::ofstream os(probe);
  if (ec || !os) throw ConfigError("output directory '" + dir.string() + "' is not writable");
  os.close();
  fs::remove(probe, ec);
  return dir;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void apply_overrides(ExperimentConfig& c, const Overrides& o) {
  if (o.seed) c.train.seed = *o.seed;
  if (o.preset) c.train.regularizers = reg::preset(*o.preset);
  if (o.out) c.output_dir = *o.out;
  if (o.k_grid) c.train.k_grid = *o.k_grid;
  c.validate();
}

void write_report(const fs::path& stem, const metrics::RedundancyReport& report) {
  write_text(fs::path(stem) += ".json", dump(json(report)));
  write_text(fs::path(stem) += ".csv", metrics::to_csv(report));
}

// Maps exceptions to exit codes; `body` returns the success code.
template <typename F>
int guarded(Streams io, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUserError;
  } catch (const metrics::MetricError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUserError;
  } catch (const std::exception& e) {
    io.err << "runtime error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

struct RunResult {
  TrainLog log;
  double final_test_accuracy = 0;
};

// Trains one configuration into its output directory.
RunResult run_experiment(const ExperimentConfig& cfg, std::ostream& out) {
  const fs::path dir = prepare_output(resolve_output_dir(cfg.output_dir));
  write_text(dir / "config.json", dump(json(cfg)));
  fs::create_directories(dir / "reports");
  if (cfg.checkpoint_every > 0) fs::create_directories(dir / "checkpoints");

  const DataSplits data = load_data(cfg.train.data, cfg.model.image_size, cfg.model.channels);
  ViTModel model(cfg.model, cfg.train.seed);
  const json meta = {{"seed", cfg.train.seed}, {"experiment", cfg}};

  std::ofstream jsonl(dir / "train_log.jsonl", std::ios::trunc);
  if (!jsonl) throw RuntimeFailure("cannot write " + (dir / "train_log.jsonl").string());
  TrainCallbacks callbacks;
  callbacks.on_epoch = [&](const EpochRecord& e) {
    json j = e;
    j["seed"] = cfg.train.seed;
    jsonl << j.dump() << "\n" << std::flush;
    out << "epoch " << e.epoch << "  loss " << std::fixed << std::setprecision(4) << e.loss << "  train "
        << e.train_accuracy << "  test " << e.test_accuracy << std::defaultfloat << "\n";
    if (cfg.checkpoint_every > 0 && (e.epoch + 1) % cfg.checkpoint_every == 0) {
      save_model(dir / "checkpoints" / ("epoch-" + std::to_string(e.epoch) + ".ckpt"), model, meta);
    }
  };
  callbacks.on_snapshot = [&](const Snapshot& s) { write_report(dir / "reports" / s.report.model_id, s.report); };

  RunResult result;
  result.log = train(model, cfg.train, data, callbacks);
  write_text(dir / "train_log.csv", to_csv(result.log));
  save_model(dir / "model.ckpt", model, meta);
  if (!result.log.epochs.empty()) {
    result.final_test_accuracy = result.log.epochs.back().test_accuracy;
    write_report(dir / "report", result.log.snapshots.back().report);
  }
  return result;
}

void print_summary(std::ostream& out, const RunResult& r, const std::vector<std::size_t>& k_grid) {
  if (r.log.epochs.empty()) {
    out << "no epochs run\n";
    return;
  }
  const auto s = summarize(r.log.snapshots.back().report);
  out << "final test accuracy " << format_double(r.final_test_accuracy) << "\n";
  out << "embedding cosine (layer mean) " << format_double(s.embedding_cosine) << "\n";
  out << "attention cosine (layer mean) " << format_double(s.attention_cosine) << "\n";
  for (std::size_t i = 0; i < k_grid.size(); ++i)
    out << "weight pca error k=" << k_grid[i] << " (layer mean) " << format_double(s.pca_error[i]) << "\n";
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

// --- ExperimentConfig -----------------------------------------------------

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  if (train.regularizers.lambda_mixing > 0 && !model.patch_classifier) {
    throw ConfigError("regularizers: lambda_mixing > 0 needs model.patch_classifier = true");
  }
  if (train.data.kind == "synthetic-patterns" && model.image_size % kSyntheticPatch != 0) {
    throw ConfigError("model: synthetic-patterns needs image_size divisible by 4");
  }
  for (std::size_t k : train.k_grid) {
    if (k == 0 || k > model.dim) {
      throw ConfigError("k_grid: value " + std::to_string(k) + " outside [1, " + std::to_string(model.dim) + "]");
    }
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"model", c.model},
           {"train", c.train},
           {"regularizers", c.train.regularizers},
           {"output_dir", c.output_dir},
           {"k_grid", c.train.k_grid},
           {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const json& j, ExperimentConfig& c) {
  using namespace json_util;
  require_known_keys(j, {"model", "train", "regularizers", "output_dir", "k_grid", "checkpoint_every"}, "");
  c = ExperimentConfig{};
  if (j.contains("model")) c.model = j["model"].get<ViTConfig>();
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  if (j.contains("regularizers")) c.train.regularizers = j["regularizers"].get<reg::RegularizerConfig>();
  read(j, "output_dir", c.output_dir, "");
  read(j, "k_grid", c.train.k_grid, "");
  read(j, "checkpoint_every", c.checkpoint_every, "");
}

ExperimentConfig load_experiment(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  ExperimentConfig c;
  try {
    c = read_json(path).get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

fs::path resolve_output_dir(const std::string& dir) {
  fs::path p(dir);
  const char* root = std::getenv(kOutputRootEnv);
  if (p.is_relative() && root && *root) return fs::path(root) / p;
  return p;
}

// --- Ablation -------------------------------------------------------------

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows = {
      {"none", false, false, false, false, false},
      {"mixing", true, false, false, false, false},
      {"mixing+within", true, true, false, false, false},
      {"mixing+cross", true, false, true, false, false},
      {"mixing+within+cross", true, true, true, false, false},
      {"mixing+within+cross+attention", true, true, true, true, false},
      {"all", true, true, true, true, true},
  };
  return rows;
}

reg::RegularizerConfig ablation_config(const reg::RegularizerConfig& base, const AblationRow& row) {
  auto c = base;
  if (!row.mixing) c.lambda_mixing = 0;
  if (!row.within) c.lambda_embed_within = 0;
  if (!row.cross) c.lambda_embed_cross = 0;
  if (!row.attention) c.lambda_attention = 0;
  if (!row.weight) c.lambda_weight = 0;
  return c;
}

// --- Reports --------------------------------------------------------------

LevelSummary summarize(const metrics::RedundancyReport& report) {
  LevelSummary s;
  s.pca_error.assign(report.k_grid.size(), 0.0);
  if (report.layers.empty()) return s;
  for (const auto& l : report.layers) {
    s.embedding_cosine += l.embedding_cosine_within;
    s.attention_cosine += l.attention_cosine_within;
    for (std::size_t i = 0; i < s.pca_error.size(); ++i) s.pca_error[i] += l.pca_error[i];
  }
  const double n = static_cast<double>(report.layers.size());
  s.embedding_cosine /= n;
  s.attention_cosine /= n;
  for (auto& v : s.pca_error) v /= n;
  return s;
}

std::vector<DeltaRow> compare_reports(const metrics::RedundancyReport& a, const metrics::RedundancyReport& b) {
  if (a.layers.size() != b.layers.size()) {
    throw metrics::MetricError("reports have " + std::to_string(a.layers.size()) + " and " +
                               std::to_string(b.layers.size()) + " layers");
  }
  if (a.k_grid != b.k_grid) throw metrics::MetricError("reports use different k-grids");
  if (a.matrices.size() != b.matrices.size()) throw metrics::MetricError("reports list different weight matrices");
  for (std::size_t i = 0; i < a.matrices.size(); ++i) {
    if (a.matrices[i].name != b.matrices[i].name || a.matrices[i].layer != b.matrices[i].layer) {
      throw metrics::MetricError("reports list different weight matrices");
    }
  }
  // Both CSV renderings share their row structure once the checks pass.
  const auto la = split(metrics::to_csv(a), '\n'), lb = split(metrics::to_csv(b), '\n');
  std::vector<DeltaRow> rows;
  for (std::size_t i = 1; i < la.size(); ++i) {
    if (la[i].empty()) continue;
    const auto fa = split(la[i], ','), fb = split(lb[i], ',');
    DeltaRow r{fa[0], fa[1], fa[2], fa[3], fa[4]};
    r.a = std::strtod(fa[5].c_str(), nullptr);
    r.b = std::strtod(fb[5].c_str(), nullptr);
    r.delta = r.b - r.a;
    r.relative = r.delta == 0.0 ? 0.0 : r.delta / std::abs(r.a);
    rows.push_back(r);
  }
  return rows;
}

// --- Commands -------------------------------------------------------------

int cmd_train(const std::string& config_path, const Overrides& overrides, Streams io) {
  return guarded(io, [&] {
    auto cfg = load_experiment(config_path);
    apply_overrides(cfg, overrides);
    const auto k_grid = cfg.train.k_grid.empty() ? default_k_grid(cfg.model.dim) : cfg.train.k_grid;
    const auto result = run_experiment(cfg, io.out);
    print_summary(io.out, result, k_grid);
    io.out << "outputs in " << resolve_output_dir(cfg.output_dir).string() << "\n";
    return int{kOk};
  });
}

int cmd_analyze(const std::string& checkpoint_path, const std::string& data_path, const Overrides& overrides,
                Streams io) {
  return guarded(io, [&] {
    // Data argument: a dataset spec, or an experiment config whose train.data,
    // metric_sample_size and k_grid are used.
    const json dj = read_json(data_path);
    DatasetSpec spec;
    std::size_t chunk = TrainConfig{}.metric_sample_size;
    std::vector<std::size_t> k_grid;
    try {
      if (dj.is_object() && (dj.contains("train") || dj.contains("model"))) {
        const auto exp = dj.get<ExperimentConfig>();
        spec = exp.train.data;
        chunk = exp.train.metric_sample_size;
        k_grid = exp.train.k_grid;
      } else {
        spec = dj.get<DatasetSpec>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(data_path + ": " + e.what());
    }
    if (overrides.k_grid) k_grid = *overrides.k_grid;
    if (!fs::exists(checkpoint_path)) throw ConfigError("checkpoint '" + checkpoint_path + "' does not exist");
    const ViTModel model = [&] {
      try {
        return load_model(checkpoint_path);
      } catch (const CheckpointError& e) {
        throw CheckpointError(checkpoint_path + ": " + e.what());
      }
    }();
    if (k_grid.empty()) k_grid = default_k_grid(model.config().dim);
    for (std::size_t k : k_grid)
      if (k == 0 || k > model.config().dim) throw ConfigError("k_grid: value " + std::to_string(k) + " out of range");

    const DataSplits data = load_data(spec, model.config().image_size, model.config().channels);
    metrics::ReportOptions opt;
    opt.k_grid = k_grid;
    opt.model_id = fs::path(checkpoint_path).stem().string();
    const auto report = probe_report(model, data.probe, opt, chunk);

    const fs::path dir = prepare_output(resolve_output_dir(overrides.out.value_or("analysis")));
    write_report(dir / "report", report);
    const auto s = summarize(report);
    io.out << "layers " << report.layers.size() << ", probe images " << report.sample_count << "\n";
    io.out << "embedding cosine (layer mean) " << format_double(s.embedding_cosine) << "\n";
    io.out << "attention cosine (layer mean) " << format_double(s.attention_cosine) << "\n";
    io.out << "report written to " << (dir / "report.json").string() << "\n";
    return int{kOk};
  });
}

int cmd_compare(const std::string& report_a, const std::string& report_b, const Overrides& overrides, Streams io) {
  return guarded(io, [&] {
    auto load = [](const std::string& p) {
      if (!fs::exists(p)) throw ConfigError("report '" + p + "' does not exist");
      return read_json(p).get<metrics::RedundancyReport>();
    };
    const auto a = load(report_a), b = load(report_b);
    const auto rows = compare_reports(a, b);

    std::string csv = "level,metric,layer,matrix,k,a,b,delta,relative\n";
    for (const auto& r : rows) {
      csv += r.level + "," + r.metric + "," + r.layer + "," + r.matrix + "," + r.k + "," + format_double(r.a) + "," +
             format_double(r.b) + "," + format_double(r.delta) + "," + format_double(r.relative) + "\n";
    }
    const fs::path dir = prepare_output(resolve_output_dir(overrides.out.value_or("comparison")));
    write_text(dir / "compare.csv", csv);

    const auto sa = summarize(a), sb = summarize(b);
    std::ostringstream summary;
    auto line = [&](const std::string& what, double va, double vb) {
      summary << std::left << std::setw(34) << what << format_double(va) << " -> " << format_double(vb)
              << "  delta " << format_double(vb - va);
      if (va != 0.0) summary << " (" << std::showpos << std::fixed << std::setprecision(1)
                             << 100.0 * (vb - va) / std::abs(va) << "%" << std::noshowpos << std::defaultfloat << ")";
      summary << "\n";
    };
    summary << "a: " << report_a << "\nb: " << report_b << "\n";
    line("embedding cosine (layer mean)", sa.embedding_cosine, sb.embedding_cosine);
    line("attention cosine (layer mean)", sa.attention_cosine, sb.attention_cosine);
    for (std::size_t i = 0; i < a.k_grid.size(); ++i)
      line("weight pca error k=" + std::to_string(a.k_grid[i]) + " (layer mean)", sa.pca_error[i], sb.pca_error[i]);
    write_text(dir / "summary.txt", summary.str());
    io.out << summary.str();
    return int{kOk};
  });
}

int cmd_ablate(const std::string& config_path, const Overrides& overrides, Streams io) {
  return guarded(io, [&] {
    auto base = load_experiment(config_path);
    apply_overrides(base, overrides);
    const auto k_grid = base.train.k_grid.empty() ? default_k_grid(base.model.dim) : base.train.k_grid;
    const fs::path root = prepare_output(resolve_output_dir(base.output_dir));

    std::string csv = "row,mixing,within,cross,attention,weight,test_accuracy,embedding_cosine,attention_cosine";
    for (std::size_t k : k_grid) csv += ",pca_error_k" + std::to_string(k);
    csv += "\n";
    for (const auto& row : ablation_rows()) {
      auto cfg = base;
      cfg.train.regularizers = ablation_config(base.train.regularizers, row);
      // Resolved already; keep the cells under the same root.
      cfg.output_dir = (root / row.name).string();
      cfg.validate();
      io.out << "== " << row.name << "\n";
      const auto result = run_experiment(cfg, io.out);
      const auto& r = cfg.train.regularizers;
      csv += row.name + "," + format_double(r.lambda_mixing) + "," + format_double(r.lambda_embed_within) + "," +
             format_double(r.lambda_embed_cross) + "," + format_double(r.lambda_attention) + "," +
             format_double(r.lambda_weight) + ",";
      if (result.log.epochs.empty()) {
        csv += ",,";
        for (std::size_t i = 0; i < k_grid.size(); ++i) csv += ",";
      } else {
        const auto s = summarize(result.log.snapshots.back().report);
        csv += format_double(result.final_test_accuracy) + "," + format_double(s.embedding_cosine) + "," +
               format_double(s.attention_cosine);
        for (double v : s.pca_error) csv += "," + format_double(v);
      }
      csv += "\n";
    }
    write_text(root / "ablation.csv", csv);
    io.out << csv;
    return int{kOk};
  });
}

}  // namespace vitdiv::cli
