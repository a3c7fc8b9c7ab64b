#pragma once

#include <atwb/attacks.hpp>
#include <atwb/dataset.hpp>
#include <atwb/model.hpp>
#include <atwb/pgm.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace atwb {

struct ActivationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;      // >= 0
  std::vector<double> normalized;  // values / max, or all zero
  int target_class = 0;
  std::string layer;

  GrayImage to_image() const;  // normalized map scaled to 0..255
};

// Builds an ActivationMap from raw non-negative values, filling `normalized`.
ActivationMap make_activation_map(std::size_t height, std::size_t width, std::vector<double> values,
                                  int target_class, std::string layer);

// Grad-CAM at `layer` for one image [1,C,H,W] in evaluation mode: channel
// weights are spatial means of d logit[class] / d A_k; map = relu(sum_k w_k A_k).
template <typename T>
ActivationMap grad_cam(const ModelGraph<T>& model, const Tensor<T>& image, int class_index,
                       const std::string& layer);

// Bilinear resampling with aligned corners.
ActivationMap upsample_map(const ActivationMap& map, std::size_t out_height, std::size_t out_width);

struct DifferenceMap {
  Shape shape;                         // [C,H,W]
  std::vector<double> perturbation;    // x_adv - x
  std::vector<std::uint8_t> rendering; // global min-max scaled to 0..255; constant -> 128

  GrayImage to_image() const;  // channel planes stacked vertically
};

// round(255 * (p - min) / (max - min)) over all elements; 128 everywhere when p is constant.
std::vector<std::uint8_t> render_perturbation(std::span<const double> perturbation);

template <typename T>
DifferenceMap difference_map(const Tensor<T>& image, const Tensor<T>& adversarial);

// Share of total |p| (summed over channels) that falls inside the binary mask [H,W].
double saliency_overlap(const DifferenceMap& diff, std::span<const std::uint8_t> mask);

// Pearson correlation of two equally sized maps; 0 when either is constant.
double map_correlation(const ActivationMap& a, const ActivationMap& b);

// One image explained at one radius: Grad-CAM before and after a PGD attack
// (upsampled to the image grid) and the perturbation it took.
struct SampleExplanation {
  std::size_t index = 0;
  int label = 0;
  double epsilon = 0.0;
  int clean_prediction = 0;
  int adversarial_prediction = 0;
  GrayImage image;  // channel planes stacked vertically
  ActivationMap cam_clean;
  ActivationMap cam_adversarial;
  DifferenceMap difference;
  double saliency_overlap = 0.0;  // NaN when the dataset carries no masks
  double cam_correlation = 0.0;
};

// Attacks each selected image at every radius (fresh PGD with `attack`) and
// explains the model's predicted class on both sides of the attack.
template <typename T>
std::vector<SampleExplanation> explain_samples(const ModelGraph<T>& model, const Dataset& dataset,
                                               std::span<const std::size_t> indices,
                                               std::span<const double> epsilons,
                                               const AttackConfig& attack, const std::string& layer);

// Writes <tag>_image_<i>.pgm, <tag>_cam_<i>_clean.pgm, <tag>_cam_<i>_eps<e>.pgm,
// <tag>_diff_<i>_eps<e>.pgm, the unscaled maps in <tag>_maps.atwb and
// <tag>_explanations.csv into `dir`. The tag is normally the head kind.
void write_explanations(std::span<const SampleExplanation> explanations, const std::string& tag,
                        const std::filesystem::path& dir);

// Evenly spaced indices 0, n/k, 2n/k, ... (k of them, k <= n).
std::vector<std::size_t> spread_indices(std::size_t n, std::size_t k);

}  // namespace atwb
