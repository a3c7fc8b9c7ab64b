#include <atwb/model_io.hpp>

#include <atwb/container.hpp>

namespace atwb {

std::filesystem::path metadata_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".json");
  return p;
}

template <typename T>
void save_model(const ModelGraph<T>& model, const std::filesystem::path& path) {
  std::vector<ContainerEntry> entries;
  for (const auto& p : model.parameters()) entries.push_back({p.name, p.var.value()});
  save_container(entries, path);
  nlohmann::json meta = model.metadata;
  meta["config"] = model.config().to_json();
  const std::string text = meta.dump(2) + "\n";
  write_file_bytes(metadata_path(path),
                   std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <typename T>
ModelGraph<T> load_model(const std::filesystem::path& path) {
  const auto meta_bytes = read_file_bytes(metadata_path(path));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model metadata '" + metadata_path(path).string() + "': " + e.what());
  }
  if (!meta.contains("config")) throw FormatError("model metadata has no 'config' section");
  ModelGraph<T> model(ModelConfig::from_json(meta.at("config")));
  model.metadata = meta;

  const auto entries = load_container(path);
  if (entries.size() != model.parameters().size()) {
    throw FormatError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                      std::to_string(model.parameters().size()));
  }
  for (const auto& e : entries) {
    if (!model.parameters().contains(e.name)) {
      throw FormatError("checkpoint tensor '" + e.name + "' is not a parameter of this model");
    }
    auto& target = model.parameters().at(e.name).value();
    Tensor<T> value = std::visit([](const auto& t) { return t.template cast<T>(); }, e.tensor);
    if (value.shape() != target.shape()) {
      throw FormatError("checkpoint tensor '" + e.name + "' has shape " + to_string(value.shape()) +
                        ", expected " + to_string(target.shape()));
    }
    target = std::move(value);
  }
  return model;
}

template void save_model<float>(const ModelGraph<float>&, const std::filesystem::path&);
template void save_model<double>(const ModelGraph<double>&, const std::filesystem::path&);
template ModelGraph<float> load_model<float>(const std::filesystem::path&);
template ModelGraph<double> load_model<double>(const std::filesystem::path&);

}  // namespace atwb
