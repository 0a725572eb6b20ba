#include "vitdiv/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace vitdiv {

namespace {

using json = nlohmann::json;

bool decays(const NamedTensor& p) {
  return p.tensor.rank() == 2 && p.name != "cls_token" && p.name != "pos_embed";
}

void require_finite(const Tensor& t, const std::string& term) {
  const double v = t.item();
  if (!std::isfinite(v)) throw NumericError("non-finite loss term '" + term + "' (" + std::to_string(v) + ")");
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
  if (batch_size < 1) fail("batch_size must be positive");
  if (regularizers.lambda_mixing > 0 && batch_size < 2) fail("batch_size must be at least 2 when mixing is enabled");
  if (epochs > 0 && warmup_epochs >= epochs) fail("warmup_epochs must be smaller than epochs");
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
  if (metric_sample_size < 1) fail("metric_sample_size must be positive");
  if (data.train_size < batch_size) fail("data.train_size is smaller than batch_size");
  if (data.test_size < 1) fail("data.test_size must be positive");
  if (data.probe_size < 1) fail("data.probe_size must be positive");
  regularizers.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"warmup_epochs", c.warmup_epochs},
           {"weight_decay", c.weight_decay},
           {"betas", {c.beta1, c.beta2}},
           {"adam_eps", c.adam_eps},
           {"grad_clip", c.grad_clip},
           {"seed", c.seed},
           {"eval_every", c.eval_every},
           {"metric_sample_size", c.metric_sample_size},
           {"data", c.data}};
}

void from_json(const json& j, TrainConfig& c) {
  using namespace json_util;
  const char* where = "train";
  require_known_keys(j,
                     {"epochs", "batch_size", "base_lr", "warmup_epochs", "weight_decay", "betas", "adam_eps",
                      "grad_clip", "seed", "eval_every", "metric_sample_size", "data"},
                     where);
  read(j, "epochs", c.epochs, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "base_lr", c.base_lr, where);
  read(j, "warmup_epochs", c.warmup_epochs, where);
  read(j, "weight_decay", c.weight_decay, where);
  if (j.contains("betas")) {
    const auto& b = j["betas"];
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      throw ConfigError("invalid value for 'train.betas': expected [beta1, beta2]");
    }
    c.beta1 = b[0].get<double>();
    c.beta2 = b[1].get<double>();
  }
  read(j, "adam_eps", c.adam_eps, where);
  read(j, "grad_clip", c.grad_clip, where);
  read(j, "seed", c.seed, where);
  read(j, "eval_every", c.eval_every, where);
  read(j, "metric_sample_size", c.metric_sample_size, where);
  if (j.contains("data")) c.data = j["data"].get<DatasetSpec>();
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (warmup_steps >= total_steps || step > total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " with warmup " + std::to_string(warmup_steps) +
                            " and total " + std::to_string(total_steps));
  }
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& state, std::size_t step,
                double lr, double weight_decay, const AdamWHyper& h) {
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (grad.size() != param.size() || state.m.size() != param.size()) {
    throw ShapeError("adamw_step: parameter, gradient and state sizes differ");
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1, vhat = state.v[i] / c2;
    param[i] = param[i] * decay - lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWHyper hyper, double weight_decay)
    : params_(std::move(params)), state_(params_.size()), hyper_(hyper), weight_decay_(weight_decay) {}

void AdamW::step(double lr) {
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    std::vector<double> g(p.grad().begin(), p.grad().end());
    adamw_step(p.mutable_data(), g, state_[i], step_, lr, decays(params_[i]) ? weight_decay_ : 0.0, hyper_);
  }
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor t = p.tensor;
      t.scale_grad(s);
    }
  }
  return norm;
}

LossParts compose_loss(const Tensor& class_logits, std::span<const int> labels, const reg::RegularizerTerms& terms,
                       const std::optional<Tensor>& mixing, const reg::RegularizerConfig& config) {
  LossParts out;
  out.classification = cross_entropy(class_logits, labels);
  out.total = out.classification;
  if (mixing && config.lambda_mixing > 0) {
    Tensor w = scale(*mixing, config.lambda_mixing);
    out.weighted.emplace_back("mixing", w);
    out.total = add(out.total, w);
  }
  for (const auto& t : terms.breakdown) {
    Tensor w = scale(t.value, t.coefficient);
    out.weighted.emplace_back(t.name, w);
    out.total = add(out.total, w);
  }
  return out;
}

void to_json(json& j, const EpochRecord& r) {
  j = json{{"epoch", r.epoch},
           {"loss", r.loss},
           {"classification", r.classification},
           {"train_accuracy", r.train_accuracy},
           {"test_accuracy", r.test_accuracy},
           {"lr", r.lr},
           {"degenerate_rows", r.degenerate_rows}};
  if (!r.regularizers.empty()) {
    json terms = json::array();
    for (const auto& t : r.regularizers)
      terms.push_back({{"name", t.name}, {"coefficient", t.coefficient}, {"weighted", t.weighted}});
    j["regularizers"] = terms;
  }
}

void from_json(const json& j, EpochRecord& r) {
  r = EpochRecord{};
  j.at("epoch").get_to(r.epoch);
  j.at("loss").get_to(r.loss);
  j.at("classification").get_to(r.classification);
  j.at("train_accuracy").get_to(r.train_accuracy);
  j.at("test_accuracy").get_to(r.test_accuracy);
  j.at("lr").get_to(r.lr);
  j.at("degenerate_rows").get_to(r.degenerate_rows);
  if (j.contains("regularizers")) {
    for (const auto& t : j["regularizers"])
      r.regularizers.push_back({t.at("name").get<std::string>(), t.at("coefficient").get<double>(),
                                t.at("weighted").get<double>()});
  }
}

std::string to_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& e : log.epochs) {
    json j = e;
    j["seed"] = log.seed;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<EpochRecord> parse_jsonl(const std::string& text) {
  std::vector<EpochRecord> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    j.erase("seed");
    out.push_back(j.get<EpochRecord>());
  }
  return out;
}

std::string to_csv(const TrainLog& log) {
  std::vector<std::string> names;
  for (const auto& e : log.epochs)
    for (const auto& t : e.regularizers)
      if (std::find(names.begin(), names.end(), t.name) == names.end()) names.push_back(t.name);
  std::string out = "epoch,loss,classification";
  for (const auto& n : names) out += "," + n;
  out += ",train_accuracy,test_accuracy,lr\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const auto& e : log.epochs) {
    out += std::to_string(e.epoch) + "," + num(e.loss) + "," + num(e.classification);
    for (const auto& n : names) {
      double v = 0;
      for (const auto& t : e.regularizers)
        if (t.name == n) v = t.weighted;
      out += "," + num(v);
    }
    out += "," + num(e.train_accuracy) + "," + num(e.test_accuracy) + "," + num(e.lr) + "\n";
  }
  return out;
}

double evaluate(const ViTModel& model, const Dataset& data, std::size_t chunk) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    auto trace = forward(model, std::span(data.images).subspan(start, n), false);
    const std::size_t classes = trace.class_logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      if (static_cast<int>(argmax_row(trace.class_logits.data().subspan(i * classes, classes))) == data.labels[start + i])
        ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

metrics::RedundancyReport probe_report(const ViTModel& model, const Dataset& probe,
                                       const metrics::ReportOptions& options, std::size_t chunk) {
  if (probe.size() == 0) throw DataError("probe set is empty");
  NoGradGuard guard;
  std::vector<ForwardTrace> traces;
  for (std::size_t start = 0; start < probe.size(); start += chunk) {
    const std::size_t n = std::min(chunk, probe.size() - start);
    traces.push_back(forward(model, std::span(probe.images).subspan(start, n), true));
  }
  return metrics::build_report(model, traces, options);
}

std::vector<std::size_t> default_k_grid(std::size_t dim) {
  std::vector<std::size_t> k;
  for (std::size_t div : {8u, 4u, 2u, 1u}) {
    const std::size_t v = std::max<std::size_t>(1, dim / div);
    if (k.empty() || k.back() != v) k.push_back(v);
  }
  return k;
}

TrainLog train(ViTModel& model, const TrainConfig& config, const DataSplits& data, const TrainCallbacks& callbacks) {
  config.validate();
  TrainLog log;
  log.seed = config.seed;
  if (config.epochs == 0) return log;
  const auto& train_set = data.train;
  if (train_set.size() < config.batch_size) throw DataError("training set is smaller than one batch");
  const auto& reg_cfg = config.regularizers;
  const bool trace_terms = reg_cfg.trace_terms_active();
  const bool mixing = reg_cfg.lambda_mixing > 0;

  const std::size_t batches = train_set.size() / config.batch_size;
  const std::size_t total_steps = batches * config.epochs;
  const std::size_t warmup_steps = batches * config.warmup_epochs;
  auto params = model.parameters();
  AdamW optimizer(params, {config.beta1, config.beta2, config.adam_eps}, config.weight_decay);

  std::seed_seq order_seq{config.seed, std::uint64_t{1}};
  std::seed_seq mix_seq{config.seed, std::uint64_t{2}};
  std::mt19937_64 order_rng(order_seq), mix_rng(mix_seq);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  metrics::ReportOptions report_opt;
  report_opt.k_grid = config.k_grid.empty() ? default_k_grid(model.config().dim) : config.k_grid;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t correct = 0, seen = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (std::size_t i = b * config.batch_size; i < (b + 1) * config.batch_size; ++i) {
        images.push_back(train_set.images[order[i]]);
        labels.push_back(train_set.labels[order[i]]);
      }
      for (auto& p : params) p.tensor.zero_grad();
      ForwardTrace trace = forward(model, images, trace_terms);
      reg::RegularizerTerms terms = reg::apply_all(reg_cfg, trace, model);
      std::optional<Tensor> mix;
      if (mixing) {
        mix = reg::mixing_loss(model, reg::sample_mixed_batch(images, labels, model.config().patch_size,
                                                              reg_cfg.mixing_mask_ratio, mix_rng));
      }
      LossParts loss = compose_loss(trace.class_logits, labels, terms, mix, reg_cfg);
      require_finite(loss.classification, "classification");
      for (const auto& [name, t] : loss.weighted) require_finite(t, name);
      require_finite(loss.total, "total");
      loss.total.backward();
      clip_grad_norm(params, config.grad_clip);
      const double lr = lr_at(optimizer.steps_taken() + 1, total_steps, warmup_steps, config.base_lr);
      if (b == 0) rec.lr = lr;
      optimizer.step(lr);

      rec.loss += loss.total.item();
      rec.classification += loss.classification.item();
      if (rec.regularizers.empty()) {
        for (const auto& [name, t] : loss.weighted) {
          double coefficient = name == "mixing" ? reg_cfg.lambda_mixing : 0.0;
          for (const auto& term : terms.breakdown)
            if (term.name == name) coefficient = term.coefficient;
          rec.regularizers.push_back({name, coefficient, 0.0});
        }
      }
      for (std::size_t i = 0; i < loss.weighted.size(); ++i) rec.regularizers[i].weighted += loss.weighted[i].second.item();
      rec.degenerate_rows += terms.degenerate_rows;
      const std::size_t classes = trace.class_logits.dim(1);
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (static_cast<int>(argmax_row(trace.class_logits.data().subspan(i * classes, classes))) == labels[i]) ++correct;
      seen += labels.size();
    }
    const double inv = 1.0 / static_cast<double>(batches);
    rec.loss *= inv;
    rec.classification *= inv;
    for (auto& t : rec.regularizers) t.weighted *= inv;
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.test_accuracy = evaluate(model, data.test);
    log.epochs.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);

    const bool last = epoch + 1 == config.epochs;
    if (last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0)) {
      report_opt.model_id = "epoch-" + std::to_string(epoch);
      log.snapshots.push_back({epoch, probe_report(model, data.probe, report_opt, config.metric_sample_size)});
      if (callbacks.on_snapshot) callbacks.on_snapshot(log.snapshots.back());
    }
  }
  return log;
}

}  // namespace vitdiv
