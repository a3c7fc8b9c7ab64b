#include <atwb/synth.hpp>

#include <atwb/error.hpp>
#include <atwb/prng.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace atwb {

void SynthConfig::validate() const {
  if (image_size == 0 || image_size % 8 != 0) {
    throw ValueError("SynthConfig: image_size must be a positive multiple of 8, got " +
                     std::to_string(image_size));
  }
  if (channels != 1 && channels != 3) throw ValueError("SynthConfig: channels must be 1 or 3");
  if (!(imbalance_ratio > 0.0)) throw ValueError("SynthConfig: imbalance_ratio must be positive");
  if (!(noise_amplitude >= 0.0)) throw ValueError("SynthConfig: noise_amplitude must be non-negative");
  if (!(ring_radius_min > 0.0 && ring_radius_min <= ring_radius_max) ||
      !(ring_thickness_min > 0.0 && ring_thickness_min <= ring_thickness_max) ||
      !(blob_sigma_min > 0.0 && blob_sigma_min <= blob_sigma_max)) {
    throw ValueError("SynthConfig: geometry ranges must be positive with min <= max");
  }
  class_split(n_train, imbalance_ratio);
  if (n_test > 0) class_split(n_test, imbalance_ratio);
}

nlohmann::json SynthConfig::to_json() const {
  return {{"image_size", image_size},
          {"channels", channels},
          {"n_train", n_train},
          {"n_test", n_test},
          {"imbalance_ratio", imbalance_ratio},
          {"noise_amplitude", noise_amplitude},
          {"ring_radius_min", ring_radius_min},
          {"ring_radius_max", ring_radius_max},
          {"ring_thickness_min", ring_thickness_min},
          {"ring_thickness_max", ring_thickness_max},
          {"blob_sigma_min", blob_sigma_min},
          {"blob_sigma_max", blob_sigma_max},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_test = j.at("n_test").get<std::size_t>();
  c.imbalance_ratio = j.at("imbalance_ratio").get<double>();
  c.noise_amplitude = j.at("noise_amplitude").get<double>();
  c.ring_radius_min = j.at("ring_radius_min").get<double>();
  c.ring_radius_max = j.at("ring_radius_max").get<double>();
  c.ring_thickness_min = j.at("ring_thickness_min").get<double>();
  c.ring_thickness_max = j.at("ring_thickness_max").get<double>();
  c.blob_sigma_min = j.at("blob_sigma_min").get<double>();
  c.blob_sigma_max = j.at("blob_sigma_max").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

std::pair<std::size_t, std::size_t> class_split(std::size_t n, double imbalance_ratio) {
  const auto n1 = static_cast<std::size_t>(std::floor(static_cast<double>(n) / (imbalance_ratio + 1.0)));
  const std::size_t n0 = n - n1;
  if (n0 == 0 || n1 == 0) {
    throw ValueError("class imbalance ratio " + std::to_string(imbalance_ratio) + " with n=" +
                     std::to_string(n) + " leaves class " + (n0 == 0 ? "0" : "1") +
                     " without samples");
  }
  return {n0, n1};
}

namespace {

constexpr std::uint64_t kLabelOrderTag = 0xffff'ffffULL;
constexpr double kTint[3] = {1.0, 0.8, 0.6};

void render_image(const SynthConfig& config, int label, Prng& rng, float* pixels,
                  std::uint8_t* mask) {
  const std::size_t size = config.image_size;
  const double scale = static_cast<double>(size) / 32.0;
  const double lo = 0.3 * static_cast<double>(size);
  const double hi = 0.7 * static_cast<double>(size);
  const double cx = rng.uniform(lo, hi);
  const double cy = rng.uniform(lo, hi);
  const double background = rng.uniform(0.05, 0.25);
  const double amplitude = rng.uniform(0.5, 0.75);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double aspect = rng.uniform(0.75, 1.25);
  const double ca = std::cos(angle), sa = std::sin(angle);

  double radius = 0.0, width = 0.0;
  if (label == 0) {
    width = scale * rng.uniform(config.blob_sigma_min, config.blob_sigma_max);
  } else {
    radius = scale * rng.uniform(config.ring_radius_min, config.ring_radius_max);
    width = scale * rng.uniform(config.ring_thickness_min, config.ring_thickness_max);
  }

  std::vector<double> shape(size * size);
  double peak = 0.0;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double u = (ca * dx + sa * dy) / aspect;
      const double v = (-sa * dx + ca * dy) * aspect;
      const double d = std::sqrt(u * u + v * v);
      const double offset = d - radius;
      const double value = std::exp(-offset * offset / (2.0 * width * width));
      shape[y * size + x] = value;
      peak = std::max(peak, value);
    }
  }
  for (std::size_t p = 0; p < size * size; ++p) mask[p] = shape[p] > kMaskThreshold * peak ? 1 : 0;
  for (std::size_t c = 0; c < config.channels; ++c) {
    const double tint = config.channels == 1 ? 1.0 : kTint[c];
    for (std::size_t p = 0; p < size * size; ++p) {
      const double noise = config.noise_amplitude * rng.uniform(-1.0, 1.0);
      const double value = tint * (background + amplitude * shape[p]) + noise;
      pixels[c * size * size + p] = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
}

}  // namespace

Dataset generate_split(const SynthConfig& config, std::size_t n, std::uint64_t split_tag) {
  config.validate();
  const auto [n0, n1] = class_split(n, config.imbalance_ratio);
  std::vector<int> labels(n0, 0);
  labels.insert(labels.end(), n1, 1);
  Prng order_rng(derive_seed(config.seed, {split_tag, kLabelOrderTag}));
  shuffle_in_place(labels, order_rng);

  const std::size_t size = config.image_size;
  Dataset data;
  data.images = Tensor<float>({n, config.channels, size, size});
  data.masks = Tensor<std::uint8_t>({n, size, size});
  data.labels = labels;
  data.class_names = {"blob", "ring"};
  for (std::size_t i = 0; i < n; ++i) {
    Prng rng(derive_seed(config.seed, {split_tag, i}));
    render_image(config, labels[i], rng, data.images.data() + i * config.channels * size * size,
                 data.masks.data() + i * size * size);
  }
  data.provenance = {{"generator", "atwb-synthetic"},
                     {"config", config.to_json()},
                     {"split_tag", split_tag}};
  return data;
}

SyntheticSplits generate_synthetic(const SynthConfig& config) {
  SyntheticSplits splits;
  splits.train = generate_split(config, config.n_train, 0);
  splits.train.provenance["split"] = "train";
  if (config.n_test > 0) {
    splits.test = generate_split(config, config.n_test, 1);
    splits.test.provenance["split"] = "test";
  }
  return splits;
}

}  // namespace atwb
