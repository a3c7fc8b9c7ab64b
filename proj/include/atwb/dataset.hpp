#pragma once

#include <atwb/tensor.hpp>

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace atwb {

// Labelled image set with values in [0,1].
struct Dataset {
  Tensor<float> images;                  // [N,C,H,W]
  std::vector<int> labels;               // N
  std::vector<std::string> class_names;  // K
  Tensor<std::uint8_t> masks;            // [N,H,W] binary salient support; empty when absent
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t class_count() const noexcept { return class_names.size(); }
  bool has_masks() const noexcept { return !masks.empty(); }

  // Throws ValueError on any broken invariant.
  void validate() const;

  Dataset subset(std::span<const std::size_t> indices) const;
  Tensor<float> image(std::size_t index) const;  // [1,C,H,W]
};

// Seeded shuffle of `pool` into (train, validation) with the given validation fraction.
struct DatasetSplit {
  Dataset train;
  Dataset validation;
};
DatasetSplit split_validation(const Dataset& pool, double validation_fraction, std::uint64_t seed);

// Directory layout: images.atwb, labels.csv, masks.atwb (optional), provenance.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace atwb
