#pragma once

#include <atwb/dataset.hpp>

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>

namespace atwb {

// Two-class synthetic images: class 0 is a filled Gaussian blob, class 1 an
// annulus. Geometry ranges are given for 32x32 images and scale with size.
struct SynthConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;  // 1 (grayscale) or 3 (tinted RGB)
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  double imbalance_ratio = 1.0;  // class 0 : class 1
  double noise_amplitude = 0.1;
  double ring_radius_min = 5.0;
  double ring_radius_max = 9.0;
  double ring_thickness_min = 1.0;
  double ring_thickness_max = 2.0;
  double blob_sigma_min = 2.5;
  double blob_sigma_max = 4.5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// Pixels where the noiseless shape exceeds this fraction of its peak form the mask.
inline constexpr double kMaskThreshold = 0.1;

// Per-class counts for n samples: class 1 gets floor(n / (ratio + 1)), class 0 the rest.
std::pair<std::size_t, std::size_t> class_split(std::size_t n, double imbalance_ratio);

struct SyntheticSplits {
  Dataset train;
  Dataset test;
};

// Deterministic in the seed; each image draws from its own (split, index) stream.
SyntheticSplits generate_synthetic(const SynthConfig& config);
Dataset generate_split(const SynthConfig& config, std::size_t n, std::uint64_t split_tag);

}  // namespace atwb
