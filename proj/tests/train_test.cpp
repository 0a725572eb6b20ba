#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "vitdiv/train.hpp"

using namespace vitdiv;

namespace {

ViTConfig toy_model(std::size_t depth = 2, std::size_t dim = 16) {
  ViTConfig c;
  c.depth = depth;
  c.dim = dim;
  c.heads = 2;
  c.ffn_mult = 2;
  return c;
}

TrainConfig small_run(const std::string& preset) {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.warmup_epochs = 1;
  c.eval_every = 1;
  c.metric_sample_size = 32;
  c.data.train_size = 48;
  c.data.test_size = 32;
  c.data.probe_size = 16;
  c.regularizers = reg::preset(preset);
  return c;
}

std::vector<double> flat_parameters(const ViTModel& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void write_be32(std::ofstream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

// --- Schedule and optimizer -----------------------------------------------

TEST(LrSchedule, WarmupPeakAndCosineMidpoint) {
  EXPECT_EQ(lr_at(0, 100, 10, 1e-3), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, 10, 1e-3), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, 10, 1e-3), 1e-3);
  EXPECT_NEAR(lr_at(55, 100, 10, 1e-3), 5e-4, 1e-18);
  EXPECT_NEAR(lr_at(100, 100, 10, 1e-3), 0.0, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(0, 10, 0, 2.0), 2.0);
}

TEST(LrSchedule, DecayPhaseIsMonotoneAndRangeIsChecked) {
  double prev = lr_at(10, 200, 10, 1.0);
  for (std::size_t s = 11; s <= 200; ++s) {
    const double lr = lr_at(s, 200, 10, 1.0);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, 0.0);
    prev = lr;
  }
  EXPECT_THROW(lr_at(101, 100, 10, 1e-3), std::out_of_range);
  EXPECT_THROW(lr_at(0, 10, 10, 1e-3), std::out_of_range);
}

TEST(AdamWStep, ZeroGradientOnlyDecays) {
  std::vector<double> p{1.0, -2.0, 0.5}, g(3, 0.0);
  AdamMoments state;
  adamw_step(p, g, state, 1, 1e-3, 0.0, {});
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 0.5}));
  adamw_step(p, g, state, 2, 1e-3, 0.05, {});
  EXPECT_DOUBLE_EQ(p[0], 0.99995);
  EXPECT_DOUBLE_EQ(p[1], -2.0 * 0.99995);
  EXPECT_DOUBLE_EQ(p[2], 0.5 * 0.99995);
}

TEST(AdamWStep, ConstantGradientStepApproachesLearningRate) {
  for (double g : {3.0, -0.01, 250.0}) {
    std::vector<double> p{0.0};
    std::vector<double> grad{g};
    AdamMoments state;
    double before = 0;
    for (std::size_t s = 1; s <= 5000; ++s) {
      before = p[0];
      adamw_step(p, grad, state, s, 1e-3, 0.0, {});
    }
    EXPECT_NEAR(std::abs(p[0] - before), 1e-3, 1e-9) << "g=" << g;
    EXPECT_LT((p[0] - before) * g, 0.0);
  }
  // Bias correction makes the first step exactly lr * g/|g| up to eps.
  std::vector<double> p{0.0}, grad{0.7};
  AdamMoments state;
  adamw_step(p, grad, state, 1, 1e-2, 0.0, {});
  EXPECT_NEAR(p[0], -1e-2, 1e-9);
}

TEST(AdamWStep, SizeMismatchThrows) {
  std::vector<double> p(3), g(2);
  AdamMoments state;
  EXPECT_THROW(adamw_step(p, g, state, 1, 1e-3, 0.0, {}), ShapeError);
}

TEST(AdamWOptimizer, DecaysMatricesButNotTokensOrVectors) {
  ViTModel model(toy_model(), 3);
  auto params = model.parameters();
  const auto before = params;
  std::vector<std::vector<double>> old;
  for (const auto& p : params) old.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  // Zero gradients on every parameter.
  Tensor loss = Tensor::scalar(0.0);
  for (const auto& p : params) loss = add(loss, scale(sum(p.tensor), 0.0));
  loss.backward();
  AdamW opt(params, {}, 0.5);
  opt.step(0.1);
  EXPECT_EQ(opt.steps_taken(), 1u);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool matrix = params[i].tensor.rank() == 2 && params[i].name != "cls_token" && params[i].name != "pos_embed";
    const double factor = matrix ? 0.95 : 1.0;
    auto now = params[i].tensor.data();
    for (std::size_t k = 0; k < now.size(); ++k) ASSERT_DOUBLE_EQ(now[k], old[i][k] * factor) << params[i].name;
  }
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  Tensor a = Tensor::from({2}, {1.0, 1.0}, true);
  Tensor b = Tensor::from({2, 2}, {0, 0, 0, 0}, true);
  add(sum(scale(a, 3.0)), sum(scale(b, 4.0))).backward();
  std::vector<NamedTensor> params{{"a", a}, {"b", b}};
  // Gradient entries 3,3,4,4,4,4: norm sqrt(18 + 64) = sqrt(82).
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 100.0), std::sqrt(82.0));
  EXPECT_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), std::sqrt(82.0));
  double sq = 0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  EXPECT_NEAR(a.grad()[0] / b.grad()[0], 0.75, 1e-12);
}

// --- Loss composition -----------------------------------------------------

TEST(ComposeLoss, UniformLogitsGiveLogTen) {
  Tensor logits = Tensor::zeros({4, 10});
  std::vector<int> labels{0, 3, 7, 9};
  auto parts = compose_loss(logits, labels, reg::RegularizerTerms{}, std::nullopt, reg::preset("none"));
  EXPECT_NEAR(parts.total.item(), std::log(10.0), 1e-12);
  EXPECT_EQ(parts.total.item(), parts.classification.item());
  EXPECT_TRUE(parts.weighted.empty());
}

TEST(ComposeLoss, DeitSmallWeightedSum) {
  const auto cfg = reg::preset("deit-small");
  reg::RegularizerTerms terms;
  terms.breakdown = {{"embed_within", 0.5, Tensor::scalar(0.3)},
                     {"embed_cross", 0.5, Tensor::scalar(0.2)},
                     {"attention", 1e-4, Tensor::scalar(2.0)},
                     {"weight", 5e-4, Tensor::scalar(4.0)}};
  Tensor logits = Tensor::zeros({2, 10});
  std::vector<int> labels{1, 2};
  auto parts = compose_loss(logits, labels, terms, Tensor::scalar(1.5), cfg);
  // log 10 + 1*1.5 + 0.5*0.3 + 0.5*0.2 + 1e-4*2 + 5e-4*4
  EXPECT_NEAR(parts.total.item(), std::log(10.0) + 1.5 + 0.15 + 0.1 + 2e-4 + 2e-3, 1e-12);
  ASSERT_EQ(parts.weighted.size(), 5u);
  EXPECT_EQ(parts.weighted[0].first, "mixing");
  EXPECT_NEAR(parts.weighted[4].second.item(), 2e-3, 1e-15);
}

TEST(ComposeLoss, MismatchedLabelsThrow) {
  Tensor logits = Tensor::zeros({3, 10});
  std::vector<int> labels{1, 2};
  EXPECT_THROW(compose_loss(logits, labels, {}, std::nullopt, reg::preset("none")), ShapeError);
}

// --- Config ---------------------------------------------------------------

TEST(TrainConfigTest, ValidationRejectsInvariantViolations) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.warmup_epochs = c.epochs;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.regularizers = reg::preset("deit-small");
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c.regularizers = reg::preset("none");
  EXPECT_NO_THROW(c.validate());
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfigTest, JsonRoundTripAndUnknownKeys) {
  TrainConfig c;
  c.epochs = 7;
  c.beta1 = 0.8;
  c.seed = 42;
  c.data.noise = 0.25;
  nlohmann::json j = c;
  TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(back, c);
  j["epohcs"] = 3;
  try {
    (void)j.get<TrainConfig>();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epohcs"), std::string::npos);
  }
  nlohmann::json bad = {{"data", {{"kind", "imagenet"}}}};
  EXPECT_THROW((void)bad.get<TrainConfig>(), ConfigError);
}

// --- Data -----------------------------------------------------------------

TEST(Data, SyntheticSplitsAreSeededAndDisjointStreams) {
  DatasetSpec spec;
  spec.train_size = 40;
  spec.test_size = 20;
  spec.probe_size = 10;
  auto a = load_data(spec, 16, 1), b = load_data(spec, 16, 1);
  ASSERT_EQ(a.train.size(), 40u);
  ASSERT_EQ(a.test.size(), 20u);
  ASSERT_EQ(a.probe.size(), 10u);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(a.train.labels[i], b.train.labels[i]);
    ASSERT_TRUE(std::equal(a.train.images[i].data().begin(), a.train.images[i].data().end(),
                           b.train.images[i].data().begin()));
    EXPECT_GE(a.train.labels[i], 0);
    EXPECT_LT(a.train.labels[i], 10);
  }
  EXPECT_FALSE(std::equal(a.train.images[0].data().begin(), a.train.images[0].data().end(),
                          a.test.images[0].data().begin()));
  spec.seed = 1;
  auto c = load_data(spec, 16, 1);
  EXPECT_FALSE(std::equal(a.train.images[0].data().begin(), a.train.images[0].data().end(),
                          c.train.images[0].data().begin()));
  EXPECT_THROW(load_data(spec, 18, 1), DataError);
}

TEST(Data, NoiselessSyntheticImagesAreTexturesInEveryPatch) {
  auto d = synthetic_patterns(20, 16, 2, 0, 5, 0.0, 0.0);
  for (const auto& img : d.images) {
    ASSERT_EQ(img.shape(), (Shape{2, 16, 16}));
    for (std::size_t k = 0; k < 256; ++k) {
      const double v = img.data()[k];
      EXPECT_GE(std::abs(v), 0.6 - 1e-12);
      EXPECT_LE(std::abs(v), 1.4 + 1e-12);
      EXPECT_EQ(v, img.data()[256 + k]);
    }
  }
}

TEST(Data, IdxRoundTripAndResize) {
  const auto dir = std::filesystem::temp_directory_path() / "vitdiv_idx_test";
  std::filesystem::create_directories(dir);
  const auto imgs = dir / "img.idx", lbls = dir / "lbl.idx";
  {
    std::ofstream os(imgs, std::ios::binary);
    write_be32(os, 2051);
    write_be32(os, 2);
    write_be32(os, 2);
    write_be32(os, 2);
    const unsigned char px[8] = {0, 255, 255, 0, 51, 51, 51, 51};
    os.write(reinterpret_cast<const char*>(px), 8);
    std::ofstream ls(lbls, std::ios::binary);
    write_be32(ls, 2049);
    write_be32(ls, 2);
    const unsigned char l[2] = {7, 3};
    ls.write(reinterpret_cast<const char*>(l), 2);
  }
  auto images = read_idx_images(imgs);
  auto labels = read_idx_labels(lbls);
  ASSERT_EQ(images.size(), 2u);
  EXPECT_EQ(labels, (std::vector<int>{7, 3}));
  EXPECT_EQ(images[0].data()[0], -1.0);
  EXPECT_EQ(images[0].data()[1], 1.0);
  // A constant image stays constant under resizing.
  auto big = resize_bilinear(images[1], 8);
  ASSERT_EQ(big.shape(), (Shape{1, 8, 8}));
  for (double v : big.data()) EXPECT_NEAR(v, 51 / 127.5 - 1.0, 1e-12);
  EXPECT_THROW(read_idx_images(lbls), DataError);
  EXPECT_THROW(read_idx_labels(dir / "missing.idx"), DataError);

  DatasetSpec spec;
  spec.kind = "raster-digits";
  spec.train_images = spec.test_images = imgs.string();
  spec.train_labels = spec.test_labels = lbls.string();
  spec.probe_size = 1;
  auto splits = load_data(spec, 4, 1);
  EXPECT_EQ(splits.train.size(), 2u);
  EXPECT_EQ(splits.probe.labels, (std::vector<int>{7}));
  EXPECT_EQ(splits.test.labels, (std::vector<int>{3}));
  std::filesystem::remove_all(dir);
}

// --- Evaluation -----------------------------------------------------------

TEST(Evaluate, ConstantLogitsScoreTheFirstClassShare) {
  ViTModel model(toy_model(1), 0);
  for (auto& p : model.parameters())
    if (p.name == "head.weight" || p.name == "head.bias")
      for (double& v : p.tensor.mutable_data()) v = 0.0;
  auto d = synthetic_patterns(30, 16, 1, 0, 9, 0.6, 0.2);
  // Balanced labels: three of each class.
  for (std::size_t i = 0; i < d.size(); ++i) d.labels[i] = static_cast<int>(i % 10);
  EXPECT_DOUBLE_EQ(evaluate(model, d, 7), 0.1);
  Dataset empty;
  EXPECT_THROW(evaluate(model, empty), DataError);
}

TEST(Evaluate, InvariantToDatasetOrderAndChunking) {
  ViTModel model(toy_model(), 11);
  auto d = synthetic_patterns(50, 16, 1, 0, 4, 0.6, 0.2);
  const double acc = evaluate(model, d);
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(1);
  std::shuffle(idx.begin(), idx.end(), rng);
  Dataset s;
  for (std::size_t i : idx) {
    s.images.push_back(d.images[i]);
    s.labels.push_back(d.labels[i]);
  }
  EXPECT_EQ(evaluate(model, s, 3), acc);
}

// --- Training loop --------------------------------------------------------

TEST(Train, ZeroEpochsLeavesModelUntouched) {
  ViTModel model(toy_model(), 1);
  const auto before = flat_parameters(model);
  auto cfg = small_run("toy-all-levels");
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  auto log = train(model, cfg, load_data(cfg.data, 16, 1));
  EXPECT_TRUE(log.epochs.empty());
  EXPECT_TRUE(log.snapshots.empty());
  EXPECT_EQ(flat_parameters(model), before);
}

TEST(Train, SameSeedGivesBitwiseIdenticalLogsAndWeights) {
  auto cfg = small_run("toy-all-levels");
  const auto data = load_data(cfg.data, 16, 1);
  ViTModel a(toy_model(), 5), b(toy_model(), 5);
  auto la = train(a, cfg, data), lb = train(b, cfg, data);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(to_jsonl(la), to_jsonl(lb));
  EXPECT_EQ(flat_parameters(a), flat_parameters(b));
  cfg.seed = 1;
  ViTModel c(toy_model(), 5);
  auto lc = train(c, cfg, data);
  EXPECT_NE(lc.epochs.back().loss, la.epochs.back().loss);
}

TEST(Train, LoggedLossEqualsSumOfComponents) {
  auto cfg = small_run("toy-all-levels");
  cfg.regularizers.lambda_weight = 1e-2;
  ViTModel model(toy_model(), 2);
  std::size_t callbacks = 0;
  auto log = train(model, cfg, load_data(cfg.data, 16, 1), {[&](const EpochRecord&) { ++callbacks; }, {}});
  ASSERT_EQ(log.epochs.size(), 2u);
  EXPECT_EQ(callbacks, 2u);
  for (const auto& e : log.epochs) {
    ASSERT_EQ(e.regularizers.size(), 5u);
    EXPECT_EQ(e.regularizers[0].name, "mixing");
    double total = e.classification;
    for (const auto& t : e.regularizers) total += t.weighted;
    EXPECT_NEAR(e.loss, total, 1e-9);
    EXPECT_GT(e.lr, 0.0);
  }
}

TEST(Train, AllZeroCoefficientsIsPlainCrossEntropy) {
  auto cfg = small_run("none");
  ViTModel model(toy_model(), 2);
  auto log = train(model, cfg, load_data(cfg.data, 16, 1));
  for (const auto& e : log.epochs) {
    EXPECT_TRUE(e.regularizers.empty());
    EXPECT_EQ(e.loss, e.classification);
    EXPECT_EQ(e.degenerate_rows, 0u);
    EXPECT_FALSE(nlohmann::json(e).contains("regularizers"));
  }
}

TEST(Train, SnapshotsFollowEvalPeriodAndFinalEpoch) {
  auto cfg = small_run("none");
  cfg.epochs = 5;
  cfg.eval_every = 2;
  ViTModel model(toy_model(), 2);
  std::vector<std::size_t> seen;
  auto log = train(model, cfg, load_data(cfg.data, 16, 1), {{}, [&](const Snapshot& s) { seen.push_back(s.epoch); }});
  ASSERT_EQ(log.snapshots.size(), 3u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 3, 4}));
  for (const auto& s : log.snapshots) {
    EXPECT_LT(s.epoch, log.epochs.size());
    EXPECT_EQ(s.report.model_id, "epoch-" + std::to_string(s.epoch));
    EXPECT_EQ(s.report.sample_count, cfg.data.probe_size);
    EXPECT_EQ(s.report.layers.size(), 2u);
  }
}

TEST(Train, OverfitsEightSamplesWithin200Steps) {
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 8;
  cfg.warmup_epochs = 10;
  cfg.base_lr = 3e-3;
  cfg.weight_decay = 0.0;
  cfg.eval_every = 0;
  cfg.data.train_size = 8;
  cfg.data.test_size = 8;
  cfg.data.probe_size = 8;
  cfg.regularizers = reg::preset("none");
  ViTModel model(toy_model(2, 32), 0);
  const auto data = load_data(cfg.data, 16, 1);
  auto log = train(model, cfg, data);
  EXPECT_EQ(log.epochs.size(), 200u);
  EXPECT_EQ(evaluate(model, data.train), 1.0);
}

TEST(Train, NonFiniteLossNamesTheTerm) {
  auto cfg = small_run("none");
  ViTModel model(toy_model(), 2);
  for (auto& p : model.parameters())
    if (p.name == "head.bias") p.tensor.mutable_data()[0] = std::numeric_limits<double>::infinity();
  try {
    train(model, cfg, load_data(cfg.data, 16, 1));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("classification"), std::string::npos);
  }
}

TEST(TrainLogIo, JsonlRoundTripAndCsvColumns) {
  TrainLog log;
  log.seed = 3;
  EpochRecord e;
  e.epoch = 0;
  e.loss = 2.5;
  e.classification = 2.0;
  e.regularizers = {{"mixing", 1.0, 0.4}, {"weight", 0.01, 0.1}};
  e.train_accuracy = 0.25;
  e.test_accuracy = 0.125;
  e.lr = 1e-3;
  log.epochs = {e, e};
  log.epochs[1].epoch = 1;
  EXPECT_EQ(parse_jsonl(to_jsonl(log)), log.epochs);
  const auto csv = to_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss,classification,mixing,weight,train_accuracy,test_accuracy,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
