#include "vitdiv/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "vitdiv/json_util.hpp"

namespace vitdiv {

namespace {

using json = nlohmann::json;

constexpr std::size_t kTextures = 5;

// SplitMix64 finaliser; decorrelates the per-split streams of one seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// +-1 texture value at (y, x) of a 4x4 cell.
double texture(std::size_t kind, std::size_t y, std::size_t x, std::size_t phase) {
  switch (kind) {
    case 0: return (y + phase) % 2 ? 1.0 : -1.0;
    case 1: return (x + phase) % 2 ? 1.0 : -1.0;
    case 2: return (x + y + phase) % 2 ? 1.0 : -1.0;
    case 3: return (x + y + phase) % 4 < 2 ? 1.0 : -1.0;
    default: return (x + 4 - y + phase) % 4 < 2 ? 1.0 : -1.0;
  }
}

std::uint32_t read_be32(std::istream& is, const std::filesystem::path& path) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw DataError("truncated IDX header in " + path.string());
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::ifstream open_idx(const std::filesystem::path& path, std::uint32_t magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  const auto found = read_be32(is, path);
  if (found != magic) {
    throw DataError(path.string() + ": IDX magic " + std::to_string(found) + ", expected " + std::to_string(magic));
  }
  return is;
}

Tensor to_channels(const Tensor& image, std::size_t channels) {
  if (channels == 1) return image;
  std::vector<double> v;
  for (std::size_t c = 0; c < channels; ++c) v.insert(v.end(), image.data().begin(), image.data().end());
  return Tensor::from({channels, image.dim(1), image.dim(2)}, std::move(v));
}

Dataset digits(const std::string& images, const std::string& labels, std::size_t limit, std::size_t image_size,
               std::size_t channels) {
  if (images.empty() || labels.empty()) throw DataError("raster-digits needs image and label file paths");
  auto imgs = read_idx_images(images);
  auto lbls = read_idx_labels(labels);
  if (imgs.size() != lbls.size()) {
    throw DataError(images + " and " + labels + " hold different sample counts");
  }
  Dataset d;
  const std::size_t n = std::min(limit, imgs.size());
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(to_channels(resize_bilinear(imgs[i], image_size), channels));
    d.labels.push_back(lbls[i]);
  }
  d.num_classes = 10;
  return d;
}

}  // namespace

void to_json(json& j, const DatasetSpec& s) {
  j = json{{"kind", s.kind},
           {"train_size", s.train_size},
           {"test_size", s.test_size},
           {"probe_size", s.probe_size},
           {"seed", s.seed},
           {"noise", s.noise},
           {"swap_rate", s.swap_rate},
           {"train_images", s.train_images},
           {"train_labels", s.train_labels},
           {"test_images", s.test_images},
           {"test_labels", s.test_labels}};
}

void from_json(const json& j, DatasetSpec& s) {
  using namespace json_util;
  const char* where = "train.data";
  require_known_keys(j,
                     {"kind", "train_size", "test_size", "probe_size", "seed", "noise", "swap_rate",
                      "train_images", "train_labels", "test_images", "test_labels"},
                     where);
  read(j, "kind", s.kind, where);
  read(j, "train_size", s.train_size, where);
  read(j, "test_size", s.test_size, where);
  read(j, "probe_size", s.probe_size, where);
  read(j, "seed", s.seed, where);
  read(j, "noise", s.noise, where);
  read(j, "swap_rate", s.swap_rate, where);
  read(j, "train_images", s.train_images, where);
  read(j, "train_labels", s.train_labels, where);
  read(j, "test_images", s.test_images, where);
  read(j, "test_labels", s.test_labels, where);
  if (s.kind != "synthetic-patterns" && s.kind != "raster-digits") {
    throw ConfigError("invalid value for 'train.data.kind': '" + s.kind +
                      "' (expected synthetic-patterns or raster-digits)");
  }
  if (!(s.noise >= 0.0)) throw ConfigError("'train.data.noise' must be non-negative");
  if (!(s.swap_rate >= 0.0 && s.swap_rate <= 1.0)) throw ConfigError("'train.data.swap_rate' must lie in [0, 1]");
}

Dataset synthetic_patterns(std::size_t n, std::size_t image_size, std::size_t channels, std::uint64_t task_seed,
                           std::uint64_t sample_seed, double noise, double swap_rate) {
  if (image_size == 0 || image_size % kSyntheticPatch != 0) {
    throw DataError("synthetic-patterns needs an image size divisible by 4, got " + std::to_string(image_size));
  }
  const std::size_t grid = image_size / kSyntheticPatch;
  std::mt19937_64 task(derive_seed(task_seed, 0));
  std::uniform_int_distribution<std::size_t> pick_texture(0, kTextures - 1);
  std::vector<std::vector<std::size_t>> layout(kSyntheticClasses, std::vector<std::size_t>(grid * grid));
  for (auto& cls : layout)
    for (auto& cell : cls) cell = pick_texture(task);

  std::mt19937_64 rng(sample_seed);
  std::uniform_int_distribution<int> pick_class(0, static_cast<int>(kSyntheticClasses) - 1);
  std::uniform_int_distribution<std::size_t> pick_phase(0, 3);
  std::uniform_real_distribution<double> contrast(0.6, 1.4);
  std::bernoulli_distribution swap(swap_rate);
  std::normal_distribution<double> pixel_noise(0.0, 1.0);

  Dataset d;
  d.num_classes = kSyntheticClasses;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = pick_class(rng);
    std::vector<double> plane(image_size * image_size);
    for (std::size_t cell = 0; cell < grid * grid; ++cell) {
      std::size_t kind = layout[static_cast<std::size_t>(label)][cell];
      if (swap(rng)) kind = pick_texture(rng);
      const std::size_t phase = pick_phase(rng);
      const double a = contrast(rng);
      const std::size_t y0 = (cell / grid) * kSyntheticPatch, x0 = (cell % grid) * kSyntheticPatch;
      for (std::size_t y = 0; y < kSyntheticPatch; ++y)
        for (std::size_t x = 0; x < kSyntheticPatch; ++x)
          plane[(y0 + y) * image_size + x0 + x] = a * texture(kind, y, x, phase);
    }
    std::vector<double> pixels;
    pixels.reserve(channels * plane.size());
    for (std::size_t c = 0; c < channels; ++c)
      for (double v : plane) pixels.push_back(v + noise * pixel_noise(rng));
    d.images.push_back(Tensor::from({channels, image_size, image_size}, std::move(pixels)));
    d.labels.push_back(label);
  }
  return d;
}

DataSplits load_data(const DatasetSpec& spec, std::size_t image_size, std::size_t channels) {
  DataSplits s;
  if (spec.kind == "synthetic-patterns") {
    auto make = [&](std::size_t n, std::uint64_t stream) {
      return synthetic_patterns(n, image_size, channels, spec.seed, derive_seed(spec.seed, stream), spec.noise,
                                spec.swap_rate);
    };
    s.train = make(spec.train_size, 1);
    s.test = make(spec.test_size, 2);
    s.probe = make(spec.probe_size, 3);
    return s;
  }
  if (spec.kind != "raster-digits") throw DataError("unknown dataset kind '" + spec.kind + "'");
  s.train = digits(spec.train_images, spec.train_labels, spec.train_size, image_size, channels);
  // The probe set is the head of the test file; the test split follows it.
  Dataset held = digits(spec.test_images, spec.test_labels, spec.probe_size + spec.test_size, image_size, channels);
  const std::size_t p = std::min(spec.probe_size, held.size());
  s.probe.num_classes = s.test.num_classes = held.num_classes;
  s.probe.images.assign(held.images.begin(), held.images.begin() + static_cast<std::ptrdiff_t>(p));
  s.probe.labels.assign(held.labels.begin(), held.labels.begin() + static_cast<std::ptrdiff_t>(p));
  s.test.images.assign(held.images.begin() + static_cast<std::ptrdiff_t>(p), held.images.end());
  s.test.labels.assign(held.labels.begin() + static_cast<std::ptrdiff_t>(p), held.labels.end());
  return s;
}

std::vector<Tensor> read_idx_images(const std::filesystem::path& path) {
  auto is = open_idx(path, 2051);
  const auto n = read_be32(is, path), rows = read_be32(is, path), cols = read_be32(is, path);
  const std::size_t pixels = std::size_t{rows} * cols;
  std::vector<unsigned char> buf(pixels);
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels))) {
      throw DataError(path.string() + ": truncated at image " + std::to_string(i) + " of " + std::to_string(n));
    }
    std::vector<double> v(pixels);
    for (std::size_t k = 0; k < pixels; ++k) v[k] = buf[k] / 127.5 - 1.0;
    out.push_back(Tensor::from({1, rows, cols}, std::move(v)));
  }
  return out;
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  auto is = open_idx(path, 2049);
  const auto n = read_be32(is, path);
  std::vector<unsigned char> buf(n);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n))) {
    throw DataError(path.string() + ": truncated label payload");
  }
  std::vector<int> out(buf.begin(), buf.end());
  for (int l : out)
    if (l > 9) throw DataError(path.string() + ": label " + std::to_string(l) + " outside 0..9");
  return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t size) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == size && w == size) return image;
  std::vector<double> out(c * size * size);
  auto src = image.data();
  // Pixel-centre alignment.
  auto coord = [](std::size_t i, std::size_t in, std::size_t outn) {
    const double x = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    return std::clamp(x, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < size; ++y) {
      const double fy = coord(y, h, size);
      const auto y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < size; ++x) {
        const double fx = coord(x, w, size);
        const auto x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - static_cast<double>(x0);
        auto at = [&](std::size_t yy, std::size_t xx) { return src[(ch * h + yy) * w + xx]; };
        out[(ch * size + y) * size + x] = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                                          wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
      }
    }
  return Tensor::from({c, size, size}, std::move(out));
}

}  // namespace vitdiv
