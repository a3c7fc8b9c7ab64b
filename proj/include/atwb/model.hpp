#pragma once

#include <atwb/autograd.hpp>
#include <atwb/classifier.hpp>
#include <atwb/prng.hpp>
#include <atwb/soft_attention.hpp>

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace atwb {

enum class HeadKind { baseline, attention };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct ModelConfig {
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t class_count = 2;
  HeadKind head = HeadKind::baseline;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t attention_heads = 16;
  double dropout_p = 0.5;
  std::uint64_t init_seed = 0;

  // Each stage halves the grid, so H and W must be divisible by 2^stages.
  void validate() const;
  std::size_t feature_height() const { return height >> stage_channels.size(); }
  std::size_t feature_width() const { return width >> stage_channels.size(); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

// Insertion-ordered parameter table with unique names. Copies are deep: a
// copied set owns fresh values and never aliases the original's storage.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  void add(std::string name, Var<T> var);
  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  const Var<T>& at(std::string_view name) const;
  Var<T>& at(std::string_view name);

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t element_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<NamedParameter<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class LayerKind { stem, residual, head };

struct Layer {
  std::string name;
  LayerKind kind;
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t stride;
  bool projection = false;  // residual blocks with a 1x1 shortcut convolution
};

struct ForwardOptions {
  bool training = false;
  Prng* rng = nullptr;          // required when training (dropout)
  bool parameter_grads = true;  // false: parameters enter the tape as constants
};

// Desk-scale residual classifier: 3x3 stem, residual stages that each halve the
// grid, then either a GAP->dense head or the soft-attention head.
template <typename T>
class ModelGraph final : public Classifier<T> {
 public:
  explicit ModelGraph(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const { return params_.element_count(); }

  std::size_t layer_index(std::string_view name) const;
  // Output of the last residual stage, the input to the head.
  const std::string& default_cam_layer() const;

  Var<T> forward(Tape<T>& tape, const Var<T>& batch, const ForwardOptions& options) const;
  // Applies layers [first, last).
  Var<T> forward_layers(Tape<T>& tape, const Var<T>& x, std::size_t first, std::size_t last,
                        const ForwardOptions& options) const;

  // Evaluation mode, gradients only with respect to the input.
  Var<T> logits(Tape<T>& tape, const Var<T>& input) const override;

  // Evaluation-mode logits without recording anything, in fixed-size chunks.
  Tensor<T> evaluate_logits(const Tensor<T>& batch) const;
  std::vector<int> predict(const Tensor<T>& batch) const;

  // Same architecture and parameter values at another precision.
  template <typename U>
  ModelGraph<U> converted() const {
    ModelGraph<U> out(config_);
    for (const auto& p : params_) out.parameters().at(p.name).value() = p.var.value().template cast<U>();
    out.metadata = metadata;
    return out;
  }

  nlohmann::json metadata = nlohmann::json::object();

  static constexpr std::size_t kEvalChunk = 64;

 private:
  Var<T> param(std::string_view name, const ForwardOptions& options) const;
  Var<T> apply_layer(Tape<T>& tape, const Layer& layer, const Var<T>& x,
                     const ForwardOptions& options) const;
  void check_input(const Shape& shape) const;

  ModelConfig config_;
  std::vector<Layer> layers_;
  ParameterSet<T> params_;
};

}  // namespace atwb
