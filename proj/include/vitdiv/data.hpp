#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdiv/tensor.hpp"

namespace vitdiv {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Where images come from. "synthetic-patterns" renders a seeded 10-class
/// texture-arrangement task; "raster-digits" reads IDX files (the 28x28 digit
/// format) and resizes them to the model's image size.
struct DatasetSpec {
  std::string kind = "synthetic-patterns";
  std::size_t train_size = 1000;
  std::size_t test_size = 500;
  std::size_t probe_size = 256;
  /// Data seed; the class layouts of the synthetic task depend on it too.
  std::uint64_t seed = 0;
  /// Synthetic task: per-pixel Gaussian noise and per-patch texture swap rate.
  double noise = 0.6;
  double swap_rate = 0.2;
  std::string train_images, train_labels, test_images, test_labels;

  bool operator==(const DatasetSpec&) const = default;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Dataset {
  std::vector<Tensor> images;  // each [C, S, S]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
};

struct DataSplits {
  Dataset train, test;
  /// Fixed held-out images for redundancy snapshots; never augmented.
  Dataset probe;
};

inline constexpr std::size_t kSyntheticClasses = 10;
inline constexpr std::size_t kSyntheticPatch = 4;

/// image_size must be a multiple of 4 for the synthetic task.
DataSplits load_data(const DatasetSpec& spec, std::size_t image_size, std::size_t channels);

/// n images of the synthetic task drawn from the given stream.
Dataset synthetic_patterns(std::size_t n, std::size_t image_size, std::size_t channels,
                           std::uint64_t task_seed, std::uint64_t sample_seed, double noise,
                           double swap_rate);

/// IDX image file (magic 2051) as [1, rows, cols] tensors scaled to [-1, 1].
std::vector<Tensor> read_idx_images(const std::filesystem::path& path);
/// IDX label file (magic 2049).
std::vector<int> read_idx_labels(const std::filesystem::path& path);
/// Bilinear resize of a [C, H, W] image to [C, size, size].
Tensor resize_bilinear(const Tensor& image, std::size_t size);

}  // namespace vitdiv
