#include <atwb/dataset.hpp>

#include <atwb/container.hpp>
#include <atwb/error.hpp>
#include <atwb/prng.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace atwb {

void Dataset::validate() const {
  if (images.rank() != 4) {
    throw ValueError("Dataset: images must be NCHW, got " + to_string(images.shape()));
  }
  if (images.dim(0) != labels.size()) {
    throw ValueError("Dataset: " + std::to_string(images.dim(0)) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("Dataset: pixel value outside [0,1]");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= class_count()) {
      throw ValueError("Dataset: label " + std::to_string(label) + " outside the " +
                       std::to_string(class_count()) + " declared classes");
    }
  }
  if (has_masks()) {
    const Shape expected{images.dim(0), images.dim(2), images.dim(3)};
    if (masks.shape() != expected) {
      throw ValueError("Dataset: masks shape " + to_string(masks.shape()) + " does not match " +
                       to_string(expected));
    }
    for (auto m : masks.values()) {
      if (m > 1) throw ValueError("Dataset: masks must be binary");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ValueError("Dataset::subset: no indices");
  Dataset out;
  out.class_names = class_names;
  out.provenance = provenance;
  Shape shape = images.shape();
  shape[0] = indices.size();
  const std::size_t stride = images.size() / images.dim(0);
  std::vector<float> values;
  values.reserve(indices.size() * stride);
  std::vector<std::uint8_t> mask_values;
  const std::size_t mask_stride = has_masks() ? masks.size() / masks.dim(0) : 0;
  for (std::size_t i : indices) {
    if (i >= size()) throw ValueError("Dataset::subset: index " + std::to_string(i) + " out of range");
    values.insert(values.end(), images.data() + i * stride, images.data() + (i + 1) * stride);
    out.labels.push_back(labels[i]);
    if (has_masks()) {
      mask_values.insert(mask_values.end(), masks.data() + i * mask_stride,
                         masks.data() + (i + 1) * mask_stride);
    }
  }
  out.images = Tensor<float>(std::move(shape), std::move(values));
  if (has_masks()) {
    out.masks = Tensor<std::uint8_t>({indices.size(), masks.dim(1), masks.dim(2)},
                                     std::move(mask_values));
  }
  return out;
}

Tensor<float> Dataset::image(std::size_t index) const {
  return images.slice_rows(index, index + 1);
}

DatasetSplit split_validation(const Dataset& pool, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ValueError("split_validation: fraction must lie in (0, 1)");
  }
  const std::size_t n = pool.size();
  const auto n_val = static_cast<std::size_t>(std::round(validation_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n) {
    throw ValueError("split_validation: " + std::to_string(n) + " samples are too few to split");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Prng rng(seed);
  shuffle_in_place(order, rng);
  DatasetSplit split;
  split.validation = pool.subset(std::span(order).first(n_val));
  split.train = pool.subset(std::span(order).subspan(n_val));
  return split;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());

  const std::vector<ContainerEntry> images{{"images", dataset.images}};
  save_container(images, dir / "images.atwb");
  if (dataset.has_masks()) {
    const std::vector<ContainerEntry> masks{{"masks", dataset.masks}};
    save_container(masks, dir / "masks.atwb");
  } else {
    std::filesystem::remove(dir / "masks.atwb", ec);
  }

  std::ostringstream labels;
  labels << "index,label\n";
  for (std::size_t i = 0; i < dataset.labels.size(); ++i) labels << i << ',' << dataset.labels[i] << '\n';
  const std::string text = labels.str();
  write_file_bytes(dir / "labels.csv",
                   std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

  nlohmann::json provenance = dataset.provenance;
  provenance["class_names"] = dataset.class_names;
  const std::string json = provenance.dump(2) + "\n";
  write_file_bytes(dir / "provenance.json",
                   std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("dataset directory '" + dir.string() + "' does not exist");
  }
  Dataset data;
  const auto images = load_container(dir / "images.atwb");
  data.images = find_tensor<float>(images, "images");
  if (std::filesystem::exists(dir / "masks.atwb")) {
    const auto masks = load_container(dir / "masks.atwb");
    data.masks = find_tensor<std::uint8_t>(masks, "masks");
  }

  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw IoError("cannot open '" + (dir / "labels.csv").string() + "'");
  std::string line;
  std::getline(labels, line);
  if (line != "index,label") throw FormatError("labels.csv: unexpected header '" + line + "'");
  std::size_t expected = 0;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("labels.csv: malformed row '" + line + "'");
    try {
      if (std::stoul(line.substr(0, comma)) != expected) {
        throw FormatError("labels.csv: rows out of order at '" + line + "'");
      }
      data.labels.push_back(std::stoi(line.substr(comma + 1)));
    } catch (const std::logic_error&) {
      throw FormatError("labels.csv: malformed row '" + line + "'");
    }
    ++expected;
  }

  const auto bytes = read_file_bytes(dir / "provenance.json");
  try {
    data.provenance = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("provenance.json: " + std::string(e.what()));
  }
  if (!data.provenance.contains("class_names")) {
    throw FormatError("provenance.json: missing class_names");
  }
  data.class_names = data.provenance.at("class_names").get<std::vector<std::string>>();
  data.provenance.erase("class_names");
  data.validate();
  return data;
}

}  // namespace atwb
