#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ueforge/tensor.hpp"

namespace ueforge {

// N images of shape C x H x W with values in [0,1] and labels in [0,K).
struct Dataset {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 4;
  std::vector<double> images;
  std::vector<std::uint16_t> labels;

  std::string split = "train";
  std::uint64_t seed = 0;
  int family = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * height * width; }
  std::span<const double> image(std::size_t i) const;

  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::uint16_t> batch_labels(std::span<const std::size_t> indices) const;
  // Whole dataset as one [N,C,H,W] tensor.
  Tensor all_images() const;

  // Throws InputError on inconsistent sizes or out-of-range labels/pixels.
  void validate() const;
};

struct DataGenConfig {
  std::uint64_t seed = 0;
  std::size_t classes = 4;
  std::size_t n_train = 2048;
  std::size_t n_test = 512;
  std::size_t image_size = 16;
  int family = 0;
  double noise_sigma = 0.05;
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

// Number of procedural shape families and classes per family.
inline constexpr int kNumFamilies = 3;
// Families 0 and 1 are disjoint 8-class sets; family 2 is their 16-class union.
std::vector<std::string> family_shapes(int family);

// Renders procedural shapes (seeded position/scale/rotation/intensity jitter
// plus Gaussian background noise), deterministic per (seed, family). Train and
// test come from independent streams.
DataSplit gen_data(const DataGenConfig& cfg);

// "UEDS" binary format.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace ueforge
