// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance --only N   run criterion N (1..6)
//
// Exit status is 0 when every criterion that ran passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "experiment.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"
#include "vitdiv/metrics.hpp"
#include "vitdiv/regularizers.hpp"
#include "vitdiv/train.hpp"

using namespace vitdiv;
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// --- 1. Oracle equivalence ----------------------------------------------------

Outcome criterion_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<std::size_t> small(2, 8);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = small(rng), d = small(rng), h = small(rng), t = small(rng);
    const auto a = oracle::random_vecs(rng, n, d), b = oracle::random_vecs(rng, n, d);
    const auto heads = oracle::random_stochastic(rng, h, t);
    const auto ht = oracle::heads_tensor(heads, t);
    auto err = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
    err(metrics::cosine_within(oracle::rows_tensor(a)), oracle::oracle_cos_within(a));
    err(metrics::cosine_cross(oracle::rows_tensor(a), oracle::rows_tensor(b)), oracle::oracle_cos_cross(a, b));
    err(metrics::attention_cosine_within(ht), oracle::oracle_cos_within(heads));
    err(metrics::attention_mse(ht), oracle::oracle_mse(heads));
    for (std::size_t i = 0; i < h; ++i) err(metrics::attention_std(select(ht, i)), oracle::oracle_std(heads[i]));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 10.0,
          fmt("100 inputs, 5 metrics, max abs error %.2e (limit 1e-10), %.2f s (limit 10 s)", worst, secs)};
}

// --- 2. Gradient suite --------------------------------------------------------

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t cases = 0;
  for (const auto& c : gradcases::regularizer_cases()) {
    const double e = gradcases::worst_error(c, 20);
    ++cases;
    if (e > worst) worst = e, worst_name = c.name;
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double e = gradcases::mixing_worst_error(seed);
    if (e > worst) worst = e, worst_name = "mixing_loss";
  }
  ++cases;
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0,
          fmt("%zu regularizers x 20 seeds, h=1e-5, max rel error %.2e in %s (limit 1e-4), %.1f s (limit 120 s)", cases,
              worst, worst_name.c_str(), secs)};
}

// --- 3. Closed-form spot values -----------------------------------------------

Outcome criterion_spot_values() {
  struct Spot {
    const char* name;
    double got, want;
  };
  const double r = 1 / std::sqrt(2.0);
  const std::vector<Spot> spots{
      {"SO(2I)", reg::reg_so(Tensor::from({2, 2}, {2, 0, 0, 2})).item(), 18.0},
      {"CNO(Gram diag(4,1))", reg::reg_cno(Tensor::from({2, 2}, {2, 0, 0, 1}), reg::EigenMode::Exact).item(), 9.0},
      {"MHS({e1,-e1})", reg::reg_mhs(Tensor::from({2, 2}, {1, -1, 0, 0})).item(), -std::numbers::pi},
      {"MGD(pi/2, eps=1)", reg::reg_mgd(Tensor::from({2, 2}, {1, 0, 0, 1}), 1.0, 0.0).item(),
       -std::log(1 - std::exp(-4.0))},
      {"Eq1 three vectors", metrics::cosine_within(Tensor::from({3, 2}, {1, 0, 0, 1, r, r})), 0.47140452079103173},
  };
  bool pass = true;
  std::string detail;
  for (const auto& s : spots) {
    const double e = std::abs(s.got - s.want);
    pass = pass && e < 1e-6;
    detail += fmt("%s%s=%.10g (err %.1e)", detail.empty() ? "" : "; ", s.name, s.got, e);
  }
  return {pass, detail};
}

// --- 4. Spectral properties ---------------------------------------------------

Outcome criterion_spectral() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> dims(2, 12);
  double pca_err = 0;
  bool monotone = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = dims(rng), cols = dims(rng);
    const auto w = oracle::random_vecs(rng, rows, cols);
    const Tensor wt = oracle::rows_tensor(w);
    std::vector<std::size_t> ks(std::min(rows, cols));
    for (std::size_t k = 0; k < ks.size(); ++k) ks[k] = k + 1;
    const auto errs = metrics::pca_reconstruction_errors(wt, ks);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      pca_err = std::max(pca_err, std::abs(errs[i] - oracle::oracle_pca(w, ks[i])));
      if (i > 0 && errs[i] > errs[i - 1]) monotone = false;
    }
  }

  // Power iteration on Gram matrices B B^T of square Gaussian factors.
  constexpr int kMatrices = 1000;
  std::uniform_int_distribution<std::size_t> sizes(2, 16);
  std::size_t above = 0, within = 0;
  double worst_rel = 0;
  for (int trial = 0; trial < kMatrices; ++trial) {
    const std::size_t n = sizes(rng);
    const auto b = oracle::random_vecs(rng, n, n);
    oracle::Vecs g(n, std::vector<double>(n, 0.0));
    std::vector<double> flat(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t m = 0; m < n; ++m) g[i][j] += b[i][m] * b[j][m];
        flat[i * n + j] = g[i][j];
      }
    const double exact = oracle::jacobi_eigenvalues(g).front();
    for (std::size_t steps : {1u, 2u, 5u, 50u}) {
      const double est = reg::extreme_eigenpairs(flat, n, reg::EigenMode::PowerIteration, steps, trial).lambda_max;
      if (est > exact * (1 + 1e-12)) ++above;
      if (steps == 50) {
        const double rel = (exact - est) / exact;
        worst_rel = std::max(worst_rel, rel);
        if (rel <= 1e-4) ++within;
      }
    }
  }
  const bool pass = pca_err < 1e-9 && monotone && above == 0 && within == kMatrices;
  return {pass, fmt("PCA vs Jacobi max error %.2e, nonincreasing %s; power iteration above exact %zu times; "
                    "within 1e-4 at 50 steps on %zu/%d SPD matrices (worst relative error %.2e)",
                    pca_err, monotone ? "yes" : "no", above, within, kMatrices, worst_rel)};
}

// --- 5. Directional trend -----------------------------------------------------

struct RunSummary {
  double embedding = 0, attention = 0, pca = 0, accuracy = 0;
};

cli::ExperimentConfig trend_config(const std::string& preset, std::uint64_t seed) {
  cli::ExperimentConfig c;
  c.model.depth = 4;
  c.model.dim = 64;
  c.model.heads = 4;
  c.train.epochs = 20;
  c.train.eval_every = 20;
  c.train.seed = seed;
  c.train.regularizers = reg::preset(preset);
  c.train.k_grid = {16};
  c.validate();
  return c;
}

RunSummary trend_run(const cli::ExperimentConfig& cfg) {
  const auto data = load_data(cfg.train.data, cfg.model.image_size, cfg.model.channels);
  ViTModel model(cfg.model, cfg.train.seed);
  const auto log = train(model, cfg.train, data);
  const auto s = cli::summarize(log.snapshots.back().report);
  return {s.embedding_cosine, s.attention_cosine, s.pca_error[0], log.epochs.back().test_accuracy};
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome criterion_trend() {
  const auto t0 = Clock::now();
  std::vector<double> emb, att, pca, acc;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto base = trend_run(trend_config("none", seed));
    const auto div = trend_run(trend_config("toy-all-levels", seed));
    emb.push_back((base.embedding - div.embedding) / base.embedding);
    att.push_back((base.attention - div.attention) / base.attention);
    pca.push_back(div.pca - base.pca);
    acc.push_back(100.0 * (div.accuracy - base.accuracy));
    std::printf("  seed %llu: embedding %.4f -> %.4f, attention %.4f -> %.4f, pca(k=16) %.4f -> %.4f, "
                "accuracy %.3f -> %.3f\n",
                static_cast<unsigned long long>(seed), base.embedding, div.embedding, base.attention, div.attention,
                base.pca, div.pca, base.accuracy, div.accuracy);
    std::fflush(stdout);
  }
  const double m_emb = median3(emb), m_att = median3(att), m_pca = median3(pca), m_acc = median3(acc);
  const double minutes = seconds_since(t0) / 60.0;
  const bool pass = m_emb >= 0.20 && m_att >= 0.10 && m_pca > 0 && m_acc >= -1.0 && minutes <= 30.0;
  return {pass, fmt("median over 3 seeds: embedding similarity -%.1f%% (need >= 20%%), attention similarity -%.1f%% "
                    "(need >= 10%%), PCA error at k=d/4 %+.4f (need > 0), accuracy %+.2f pp (need >= -1), "
                    "%.1f min (limit 30)",
                    100 * m_emb, 100 * m_att, m_pca, m_acc, minutes)};
}

// --- 6. Reproducibility -------------------------------------------------------

Outcome criterion_reproducibility() {
  cli::ExperimentConfig cfg;
  cfg.model.depth = 2;
  cfg.model.dim = 16;
  cfg.model.heads = 2;
  cfg.train.epochs = 3;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 16;
  cfg.train.eval_every = 1;
  cfg.train.data.train_size = 64;
  cfg.train.data.test_size = 32;
  cfg.train.data.probe_size = 32;
  cfg.train.regularizers = reg::preset("toy-all-levels");
  cfg.train.seed = 5;
  cfg.validate();

  const auto data = load_data(cfg.train.data, cfg.model.image_size, cfg.model.channels);
  auto run = [&] {
    ViTModel model(cfg.model, cfg.train.seed);
    return train(model, cfg.train, data);
  };
  const auto a = run(), b = run();
  const bool logs_equal = a == b && to_jsonl(a) == to_jsonl(b) && to_csv(a) == to_csv(b);
  bool reports_equal = a.snapshots.size() == b.snapshots.size();
  for (std::size_t i = 0; reports_equal && i < a.snapshots.size(); ++i) {
    reports_equal = nlohmann::json(a.snapshots[i].report).dump() == nlohmann::json(b.snapshots[i].report).dump() &&
                    metrics::to_csv(a.snapshots[i].report) == metrics::to_csv(b.snapshots[i].report);
  }

  const auto cfg_text = nlohmann::json(cfg).dump(2);
  const auto cfg_back = nlohmann::json::parse(cfg_text).get<cli::ExperimentConfig>();
  const bool config_rt = cfg_back == cfg && nlohmann::json(cfg_back).dump(2) == cfg_text;
  bool report_rt = true;
  for (const auto& s : a.snapshots) {
    const auto text = nlohmann::json(s.report).dump(2);
    const auto back = nlohmann::json::parse(text).get<metrics::RedundancyReport>();
    report_rt = report_rt && back == s.report && nlohmann::json(back).dump(2) == text;
  }
  const auto parsed = parse_jsonl(to_jsonl(a));
  TrainLog relog{a.seed, parsed, a.snapshots};
  const bool log_rt = parsed == a.epochs && to_jsonl(relog) == to_jsonl(a);

  const bool pass = logs_equal && reports_equal && config_rt && report_rt && log_rt;
  auto yn = [](bool v) { return v ? "yes" : "no"; };
  return {pass, fmt("same-seed logs identical %s, reports identical %s; round trips: config %s, report %s, log %s",
                    yn(logs_equal), yn(reports_equal), yn(config_rt), yn(report_rt), yn(log_rt))};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc == 3 && std::strcmp(argv[1], "--only") == 0) {
    only = std::atoi(argv[2]);
  } else if (argc != 1) {
    std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
    return 2;
  }
  struct Criterion {
    const char* title;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"oracle equivalence", criterion_oracle},       {"gradient suite", criterion_gradients},
      {"closed-form spot values", criterion_spot_values}, {"spectral properties", criterion_spectral},
      {"directional trend", criterion_trend},         {"reproducibility", criterion_reproducibility},
  };
  if (only < 0 || only > static_cast<int>(criteria.size())) {
    std::fprintf(stderr, "criterion %d does not exist\n", only);
    return 2;
  }
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("criterion %zu (%s): %s - %s\n", i + 1, criteria[i].title, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
