#pragma once

#include <atwb/model.hpp>

#include <filesystem>

namespace atwb {

// Sidecar metadata path for a checkpoint: "m.atwb" -> "m.json".
std::filesystem::path metadata_path(const std::filesystem::path& checkpoint);

// Writes every parameter under its name to an ATWB container plus a JSON
// sidecar holding the config and training metadata.
template <typename T>
void save_model(const ModelGraph<T>& model, const std::filesystem::path& path);

// Rebuilds the architecture from the sidecar and loads parameter values,
// converting precision when the stored dtype differs from T.
template <typename T>
ModelGraph<T> load_model(const std::filesystem::path& path);

}  // namespace atwb
