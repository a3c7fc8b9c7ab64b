#include <atwb/model.hpp>

#include <atwb/init.hpp>
#include <atwb/ops.hpp>

#include <algorithm>

namespace atwb {

std::string to_string(HeadKind kind) {
  return kind == HeadKind::attention ? "attention" : "baseline";
}

HeadKind parse_head_kind(std::string_view text) {
  if (text == "baseline") return HeadKind::baseline;
  if (text == "attention") return HeadKind::attention;
  throw ValueError("unknown head kind '" + std::string(text) + "' (expected baseline|attention)");
}

void ModelConfig::validate() const {
  if (channels == 0) throw ValueError("ModelConfig: channels must be positive");
  if (class_count < 2) {
    throw ValueError("ModelConfig: class_count must be at least 2, got " +
                     std::to_string(class_count));
  }
  if (stage_channels.empty()) throw ValueError("ModelConfig: at least one stage is required");
  for (std::size_t c : stage_channels) {
    if (c == 0) throw ValueError("ModelConfig: stage channels must be positive");
  }
  if (blocks_per_stage == 0) throw ValueError("ModelConfig: blocks_per_stage must be positive");
  const std::size_t factor = std::size_t{1} << stage_channels.size();
  if (height == 0 || width == 0 || height % factor != 0 || width % factor != 0) {
    throw ValueError("ModelConfig: input extents " + std::to_string(height) + "x" +
                     std::to_string(width) + " must be divisible by " + std::to_string(factor));
  }
  if (head == HeadKind::attention) {
    if (attention_heads == 0) throw ValueError("ModelConfig: attention_heads must be positive");
    if (feature_height() % 2 != 0 || feature_width() % 2 != 0) {
      throw ValueError("ModelConfig: the attention head needs an even feature grid, got " +
                       std::to_string(feature_height()) + "x" + std::to_string(feature_width()));
    }
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw ValueError("ModelConfig: dropout_p must lie in [0, 1)");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"channels", channels},
          {"height", height},
          {"width", width},
          {"class_count", class_count},
          {"head", to_string(head)},
          {"stage_channels", stage_channels},
          {"blocks_per_stage", blocks_per_stage},
          {"attention_heads", attention_heads},
          {"dropout_p", dropout_p},
          {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.channels = j.at("channels").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.class_count = j.at("class_count").get<std::size_t>();
  c.head = parse_head_kind(j.at("head").get<std::string>());
  c.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<std::size_t>();
  c.attention_heads = j.at("attention_heads").get<std::size_t>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

template <typename T>
ParameterSet<T>::ParameterSet(const ParameterSet& other) : index_(other.index_) {
  entries_.reserve(other.entries_.size());
  for (const auto& e : other.entries_) {
    entries_.push_back({e.name, Var<T>::leaf(e.var.value(), e.var.requires_grad())});
  }
}

template <typename T>
ParameterSet<T>& ParameterSet<T>::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
void ParameterSet<T>::add(std::string name, Var<T> var) {
  if (contains(name)) throw ValueError("ParameterSet: duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(var)});
}

template <typename T>
const Var<T>& ParameterSet<T>::at(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ValueError("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].var;
}

template <typename T>
Var<T>& ParameterSet<T>::at(std::string_view name) {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ValueError("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].var;
}

template <typename T>
std::size_t ParameterSet<T>::element_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.var.value().size();
  return total;
}

namespace {

template <typename T>
void add_conv(ParameterSet<T>& params, const std::string& prefix, std::size_t out,
              std::size_t in, std::size_t k, Prng& rng) {
  params.add(prefix + ".weight",
             Var<T>::leaf(kaiming_uniform<T>({out, in, k, k}, in * k * k, rng), true));
  params.add(prefix + ".bias", Var<T>::leaf(Tensor<T>({out}), true));
}

}  // namespace

template <typename T>
ModelGraph<T>::ModelGraph(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  // Backbone and head draw from separate streams so that both head kinds built
  // from one seed share a bitwise-identical backbone.
  Prng backbone_rng(derive_seed(config_.init_seed, {1}));
  Prng head_rng(derive_seed(config_.init_seed, {2}));

  const std::size_t c0 = config_.stage_channels.front();
  layers_.push_back({"stem", LayerKind::stem, config_.channels, c0, 1, false});
  add_conv(params_, "stem.conv", c0, config_.channels, 3, backbone_rng);

  std::size_t in = c0;
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    const std::size_t out = config_.stage_channels[s];
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      Layer layer{"stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1),
                  LayerKind::residual, in, out, b == 0 ? std::size_t{2} : std::size_t{1}, false};
      layer.projection = layer.stride != 1 || in != out;
      add_conv(params_, layer.name + ".conv1", out, in, 3, backbone_rng);
      add_conv(params_, layer.name + ".conv2", out, out, 3, backbone_rng);
      if (layer.projection) add_conv(params_, layer.name + ".shortcut", out, in, 1, backbone_rng);
      layers_.push_back(layer);
      in = out;
    }
  }

  layers_.push_back({"head", LayerKind::head, in, config_.class_count, 1, false});
  std::size_t head_features = in;
  if (config_.head == HeadKind::attention) {
    auto block = SoftAttentionBlock<T>::create(in, config_.attention_heads, head_rng);
    params_.add("attn.kernel", block.kernel);
    params_.add("attn.gamma", block.gamma);
    head_features = 2 * in;
  }
  params_.add("head.dense.weight",
              Var<T>::leaf(kaiming_uniform<T>({head_features, config_.class_count}, head_features,
                                              head_rng),
                           true));
  params_.add("head.dense.bias", Var<T>::leaf(Tensor<T>({config_.class_count}), true));
  metadata["config"] = config_.to_json();
}

template <typename T>
std::size_t ModelGraph<T>::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  throw ValueError("unknown layer '" + std::string(name) + "'");
}

template <typename T>
const std::string& ModelGraph<T>::default_cam_layer() const {
  return layers_[layers_.size() - 2].name;
}

template <typename T>
Var<T> ModelGraph<T>::param(std::string_view name, const ForwardOptions& options) const {
  const Var<T>& p = params_.at(name);
  if (options.parameter_grads) return p;
  return Var<T>::constant(p.value());
}

template <typename T>
void ModelGraph<T>::check_input(const Shape& shape) const {
  if (shape.size() != 4) {
    throw ShapeError("ModelGraph::forward", "expected an NCHW batch, got " + to_string(shape));
  }
  if (shape[1] != config_.channels) throw ShapeError("ModelGraph::forward", "C", config_.channels, shape[1]);
  if (shape[2] != config_.height) throw ShapeError("ModelGraph::forward", "H", config_.height, shape[2]);
  if (shape[3] != config_.width) throw ShapeError("ModelGraph::forward", "W", config_.width, shape[3]);
}

template <typename T>
Var<T> ModelGraph<T>::apply_layer(Tape<T>& tape, const Layer& layer, const Var<T>& x,
                                  const ForwardOptions& options) const {
  auto p = [&](const std::string& suffix) { return param(layer.name + suffix, options); };
  switch (layer.kind) {
    case LayerKind::stem:
      return relu(tape, conv2d(tape, x, p(".conv.weight"), p(".conv.bias"), {1, 1}));
    case LayerKind::residual: {
      const Var<T> inner = relu(tape, conv2d(tape, x, p(".conv1.weight"), p(".conv1.bias"),
                                             {layer.stride, 1}));
      const Var<T> branch = conv2d(tape, inner, p(".conv2.weight"), p(".conv2.bias"), {1, 1});
      const Var<T> shortcut =
          layer.projection
              ? conv2d(tape, x, p(".shortcut.weight"), p(".shortcut.bias"), {layer.stride, 0})
              : x;
      return relu(tape, add(tape, branch, shortcut));
    }
    case LayerKind::head: {
      Var<T> pooled;
      if (config_.head == HeadKind::attention) {
        SoftAttentionBlock<T> block;
        block.channels = layer.in_channels;
        block.heads = config_.attention_heads;
        block.kernel = param("attn.kernel", options);
        block.gamma = param("attn.gamma", options);
        Prng unused(0);
        Prng& rng = options.rng ? *options.rng : unused;
        if (options.training && options.rng == nullptr) {
          throw ValueError("ModelGraph::forward: training mode requires a random stream");
        }
        pooled = attentive_head(tape, block, x, config_.dropout_p, rng, options.training);
      } else {
        pooled = global_avg_pool(tape, x);
      }
      return dense(tape, pooled, param("head.dense.weight", options),
                   param("head.dense.bias", options));
    }
  }
  throw Error("unreachable layer kind");
}

template <typename T>
Var<T> ModelGraph<T>::forward_layers(Tape<T>& tape, const Var<T>& x, std::size_t first,
                                     std::size_t last, const ForwardOptions& options) const {
  if (first > last || last > layers_.size()) throw ValueError("forward_layers: invalid layer range");
  if (first == 0) check_input(x.shape());
  Var<T> h = x;
  for (std::size_t i = first; i < last; ++i) h = apply_layer(tape, layers_[i], h, options);
  return h;
}

template <typename T>
Var<T> ModelGraph<T>::forward(Tape<T>& tape, const Var<T>& batch,
                              const ForwardOptions& options) const {
  return forward_layers(tape, batch, 0, layers_.size(), options);
}

template <typename T>
Var<T> ModelGraph<T>::logits(Tape<T>& tape, const Var<T>& input) const {
  return forward(tape, input, ForwardOptions{false, nullptr, false});
}

template <typename T>
Tensor<T> ModelGraph<T>::evaluate_logits(const Tensor<T>& batch) const {
  check_input(batch.shape());
  const std::size_t n = batch.shape()[0];
  std::vector<T> values;
  values.reserve(n * config_.class_count);
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    Tape<T> tape;
    const Var<T> out = logits(tape, Var<T>::constant(batch.slice_rows(begin, end)));
    values.insert(values.end(), out.value().values().begin(), out.value().values().end());
  }
  return Tensor<T>({n, config_.class_count}, std::move(values));
}

template <typename T>
std::vector<int> ModelGraph<T>::predict(const Tensor<T>& batch) const {
  return argmax_rows(evaluate_logits(batch));
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class ModelGraph<float>;
template class ModelGraph<double>;

}  // namespace atwb
