#include <atwb/explain.hpp>

#include <atwb/error.hpp>
#include <atwb/container.hpp>
#include <atwb/ops.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace atwb {

ActivationMap make_activation_map(std::size_t height, std::size_t width, std::vector<double> values,
                                  int target_class, std::string layer) {
  if (values.size() != height * width) {
    throw ShapeError("make_activation_map", "value count", height * width, values.size());
  }
  ActivationMap map;
  map.height = height;
  map.width = width;
  map.values = std::move(values);
  map.target_class = target_class;
  map.layer = std::move(layer);
  const double peak = map.values.empty() ? 0.0 : *std::max_element(map.values.begin(), map.values.end());
  map.normalized.assign(map.values.size(), 0.0);
  if (peak > 0.0) {
    for (std::size_t i = 0; i < map.values.size(); ++i) map.normalized[i] = map.values[i] / peak;
  }
  return map;
}

GrayImage ActivationMap::to_image() const {
  GrayImage image{width, height, std::vector<std::uint8_t>(normalized.size())};
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    image.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(normalized[i], 0.0, 1.0)));
  }
  return image;
}

template <typename T>
ActivationMap grad_cam(const ModelGraph<T>& model, const Tensor<T>& image, int class_index,
                       const std::string& layer) {
  const std::size_t target = model.layer_index(layer);
  if (model.layers()[target].kind == LayerKind::head) {
    throw ValueError("grad_cam: layer '" + layer + "' is not a convolutional feature map");
  }
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("grad_cam", "expected a single image [1,C,H,W], got " + to_string(image.shape()));
  }
  if (class_index < 0 || static_cast<std::size_t>(class_index) >= model.config().class_count) {
    throw ValueError("grad_cam: class index " + std::to_string(class_index) + " out of range");
  }
  const ForwardOptions eval{false, nullptr, false};
  Tape<T> tape;
  const Var<T> features_value =
      model.forward_layers(tape, Var<T>::constant(image), 0, target + 1, eval);
  Var<T> features = Var<T>::leaf(features_value.value(), true);
  const Var<T> logits =
      model.forward_layers(tape, features, target + 1, model.layers().size(), eval);
  Tensor<T> selector = Tensor<T>::zeros_like(logits.value());
  selector[static_cast<std::size_t>(class_index)] = T{1};
  tape.backward(weighted_sum(tape, logits, selector));

  const Tensor<T>& a = features.value();
  const Tensor<T>& g = features.grad();
  const std::size_t channels = a.dim(1), h = a.dim(2), w = a.dim(3), plane = h * w;
  std::vector<double> cam(plane, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double weight = 0.0;
    for (std::size_t p = 0; p < plane; ++p) weight += static_cast<double>(g[c * plane + p]);
    weight /= static_cast<double>(plane);
    for (std::size_t p = 0; p < plane; ++p) cam[p] += weight * static_cast<double>(a[c * plane + p]);
  }
  for (double& v : cam) v = std::max(v, 0.0);
  return make_activation_map(h, w, std::move(cam), class_index, layer);
}

ActivationMap upsample_map(const ActivationMap& map, std::size_t out_height, std::size_t out_width) {
  if (out_height == 0 || out_width == 0) throw ValueError("upsample_map: target extents must be positive");
  if (map.height == 0 || map.width == 0) throw ValueError("upsample_map: source map is empty");
  std::vector<double> out(out_height * out_width);
  auto coordinate = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    return out_n == 1 ? 0.0
                      : static_cast<double>(i) * static_cast<double>(in_n - 1) /
                            static_cast<double>(out_n - 1);
  };
  for (std::size_t y = 0; y < out_height; ++y) {
    const double sy = coordinate(y, out_height, map.height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, map.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_width; ++x) {
      const double sx = coordinate(x, out_width, map.width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, map.width - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = map.values[y0 * map.width + x0] * (1.0 - fx) + map.values[y0 * map.width + x1] * fx;
      const double bottom = map.values[y1 * map.width + x0] * (1.0 - fx) + map.values[y1 * map.width + x1] * fx;
      out[y * out_width + x] = std::max(0.0, top * (1.0 - fy) + bottom * fy);
    }
  }
  return make_activation_map(out_height, out_width, std::move(out), map.target_class, map.layer);
}

std::vector<std::uint8_t> render_perturbation(std::span<const double> perturbation) {
  if (perturbation.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(perturbation.begin(), perturbation.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::uint8_t> out(perturbation.size(), 128);
  if (hi == lo) return out;
  for (std::size_t i = 0; i < perturbation.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (perturbation[i] - lo) / (hi - lo)));
  }
  return out;
}

GrayImage DifferenceMap::to_image() const {
  return GrayImage{shape[2], shape[0] * shape[1], rendering};
}

template <typename T>
DifferenceMap difference_map(const Tensor<T>& image, const Tensor<T>& adversarial) {
  if (image.shape() != adversarial.shape()) {
    throw ShapeError("difference_map", "image " + to_string(image.shape()) + " and adversarial " +
                                           to_string(adversarial.shape()) + " differ");
  }
  Shape shape = image.shape();
  if (shape.size() == 4) {
    if (shape[0] != 1) throw ShapeError("difference_map", "expected a single image, got " + to_string(shape));
    shape.erase(shape.begin());
  }
  if (shape.size() != 3) throw ShapeError("difference_map", "expected [C,H,W], got " + to_string(shape));
  DifferenceMap diff;
  diff.shape = shape;
  diff.perturbation.resize(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    diff.perturbation[i] = static_cast<double>(adversarial[i]) - static_cast<double>(image[i]);
  }
  diff.rendering = render_perturbation(diff.perturbation);
  return diff;
}

double saliency_overlap(const DifferenceMap& diff, std::span<const std::uint8_t> mask) {
  const std::size_t channels = diff.shape.at(0);
  const std::size_t plane = diff.shape.at(1) * diff.shape.at(2);
  if (mask.size() != plane) throw ShapeError("saliency_overlap", "mask size", plane, mask.size());
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
    throw ValueError("saliency_overlap: mask is empty");
  }
  double inside = 0.0, total = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double magnitude = std::abs(diff.perturbation[c * plane + p]);
      total += magnitude;
      if (mask[p]) inside += magnitude;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

double map_correlation(const ActivationMap& a, const ActivationMap& b) {
  if (a.values.size() != b.values.size()) {
    throw ShapeError("map_correlation", "map size", a.values.size(), b.values.size());
  }
  const double n = static_cast<double>(a.values.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    ma += a.values[i];
    mb += b.values[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double da = a.values[i] - ma, db = b.values[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

namespace {

template <typename T>
GrayImage stacked_planes(const Tensor<T>& image) {
  const std::size_t c = image.dim(1), h = image.dim(2), w = image.dim(3);
  GrayImage out{w, c * h, std::vector<std::uint8_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return out;
}

std::string epsilon_tag(double eps) {
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, "%g", eps);
  return buffer;
}

}  // namespace

template <typename T>
std::vector<SampleExplanation> explain_samples(const ModelGraph<T>& model, const Dataset& dataset,
                                               std::span<const std::size_t> indices,
                                               std::span<const double> epsilons,
                                               const AttackConfig& attack, const std::string& layer) {
  if (indices.empty()) throw ValueError("explain_samples: no images selected");
  if (epsilons.empty()) throw ValueError("explain_samples: no radii given");
  const Dataset picked = dataset.subset(indices);
  const Tensor<T> images = picked.images.template cast<T>();
  const auto clean_predictions = model.predict(images);
  const std::size_t h = images.dim(2), w = images.dim(3);

  std::vector<SampleExplanation> out;
  for (double eps : epsilons) {
    AttackConfig config = attack;
    config.epsilon = eps;
    const AttackResult<T> adv = pgd_linf(model, images, picked.labels, config);
    const auto adv_predictions = model.predict(adv.adversarial);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      SampleExplanation e;
      e.index = indices[k];
      e.label = picked.labels[k];
      e.epsilon = eps;
      e.clean_prediction = clean_predictions[k];
      e.adversarial_prediction = adv_predictions[k];
      const Tensor<T> x = images.slice_rows(k, k + 1);
      const Tensor<T> x_adv = adv.adversarial.slice_rows(k, k + 1);
      e.image = stacked_planes(x);
      e.cam_clean = upsample_map(grad_cam(model, x, e.clean_prediction, layer), h, w);
      e.cam_adversarial = upsample_map(grad_cam(model, x_adv, e.adversarial_prediction, layer), h, w);
      e.difference = difference_map(x, x_adv);
      e.saliency_overlap = std::numeric_limits<double>::quiet_NaN();
      if (picked.has_masks()) {
        const std::span<const std::uint8_t> mask(picked.masks.data() + k * h * w, h * w);
        if (std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
          e.saliency_overlap = saliency_overlap(e.difference, mask);
        }
      }
      e.cam_correlation = map_correlation(e.cam_clean, e.cam_adversarial);
      out.push_back(std::move(e));
    }
  }
  return out;
}

void write_explanations(std::span<const SampleExplanation> explanations, const std::string& tag,
                        const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  std::string csv =
      "index,label,epsilon,clean_prediction,adversarial_prediction,saliency_overlap,cam_correlation\n";
  std::vector<ContainerEntry> maps;
  auto add_map = [&](const std::string& name, const Shape& shape, const std::vector<double>& values) {
    for (const auto& entry : maps) {
      if (entry.name == name) return;  // the clean map repeats for every radius
    }
    maps.push_back({name, Tensor<double>(shape, values)});
  };
  for (const auto& e : explanations) {
    const std::string id = std::to_string(e.index);
    const std::string eps = epsilon_tag(e.epsilon);
    const std::string prefix = tag + "_";
    write_pgm(e.image, dir / (prefix + "image_" + id + ".pgm"));
    write_pgm(e.cam_clean.to_image(), dir / (prefix + "cam_" + id + "_clean.pgm"));
    write_pgm(e.cam_adversarial.to_image(), dir / (prefix + "cam_" + id + "_eps" + eps + ".pgm"));
    write_pgm(e.difference.to_image(), dir / (prefix + "diff_" + id + "_eps" + eps + ".pgm"));
    add_map("cam_" + id + "_clean", {e.cam_clean.height, e.cam_clean.width}, e.cam_clean.values);
    add_map("cam_" + id + "_eps" + eps, {e.cam_adversarial.height, e.cam_adversarial.width},
            e.cam_adversarial.values);
    add_map("diff_" + id + "_eps" + eps, e.difference.shape, e.difference.perturbation);
    char row[256];
    std::snprintf(row, sizeof row, "%zu,%d,%s,%d,%d,%.6g,%.6g\n", e.index, e.label, eps.c_str(),
                  e.clean_prediction, e.adversarial_prediction, e.saliency_overlap, e.cam_correlation);
    csv += row;
  }
  save_container(maps, dir / (tag + "_maps.atwb"));
  write_file_bytes(dir / (tag + "_explanations.csv"),
                   std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
}

std::vector<std::size_t> spread_indices(std::size_t n, std::size_t k) {
  if (k == 0 || k > n) {
    throw ValueError("spread_indices: cannot pick " + std::to_string(k) + " of " + std::to_string(n));
  }
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = i * n / k;
  return out;
}

template ActivationMap grad_cam(const ModelGraph<float>&, const Tensor<float>&, int, const std::string&);
template ActivationMap grad_cam(const ModelGraph<double>&, const Tensor<double>&, int, const std::string&);
template DifferenceMap difference_map(const Tensor<float>&, const Tensor<float>&);
template DifferenceMap difference_map(const Tensor<double>&, const Tensor<double>&);
template std::vector<SampleExplanation> explain_samples(const ModelGraph<float>&, const Dataset&,
                                                        std::span<const std::size_t>, std::span<const double>,
                                                        const AttackConfig&, const std::string&);
template std::vector<SampleExplanation> explain_samples(const ModelGraph<double>&, const Dataset&,
                                                        std::span<const std::size_t>, std::span<const double>,
                                                        const AttackConfig&, const std::string&);

}  // namespace atwb
