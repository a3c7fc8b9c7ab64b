#include <atwb/trainer.hpp>

#include <atwb/ops.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace atwb {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValueError("TrainConfig: learning_rate must be positive");
  if (!(adam_epsilon > 0.0)) throw ValueError("TrainConfig: adam_epsilon must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValueError("TrainConfig: Adam betas must lie in [0, 1)");
  }
  if (max_epochs == 0) throw ValueError("TrainConfig: max_epochs must be positive");
  if (patience < 1) throw ValueError("TrainConfig: patience must be at least 1");
  if (!(min_delta >= 0.0)) throw ValueError("TrainConfig: min_delta must be non-negative");
  if (batch_size == 0) throw ValueError("TrainConfig: batch_size must be positive");
  if (!(epoch_subsample_fraction > 0.0 && epoch_subsample_fraction <= 1.0)) {
    throw ValueError("TrainConfig: epoch_subsample_fraction must lie in (0, 1]");
  }
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ValueError("TrainConfig: validation_fraction must lie in (0, 1)");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"adam_epsilon", adam_epsilon},
          {"beta1", beta1},
          {"beta2", beta2},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"min_delta", min_delta},
          {"batch_size", batch_size},
          {"seed", seed},
          {"epoch_subsample_fraction", epoch_subsample_fraction},
          {"validation_fraction", validation_fraction},
          {"class_weighting", class_weighting}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.adam_epsilon = j.at("adam_epsilon").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.min_delta = j.at("min_delta").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.epoch_subsample_fraction = j.at("epoch_subsample_fraction").get<double>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.class_weighting = j.at("class_weighting").get<bool>();
  c.validate();
  return c;
}

template <typename T>
Tensor<T> compute_class_weights(std::span<const int> labels, std::size_t class_count) {
  if (class_count == 0) throw ValueError("compute_class_weights: class_count must be positive");
  std::vector<std::size_t> counts(class_count, 0);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= class_count) {
      throw ValueError("compute_class_weights: label " + std::to_string(label) + " out of range");
    }
    ++counts[static_cast<std::size_t>(label)];
  }
  std::vector<double> inverse(class_count);
  for (std::size_t c = 0; c < class_count; ++c) {
    if (counts[c] == 0) {
      throw ValueError("compute_class_weights: class " + std::to_string(c) + " has no samples");
    }
    inverse[c] = 1.0 / static_cast<double>(counts[c]);
  }
  const double mean =
      std::accumulate(inverse.begin(), inverse.end(), 0.0) / static_cast<double>(class_count);
  Tensor<T> weights({class_count});
  for (std::size_t c = 0; c < class_count; ++c) weights[c] = static_cast<T>(inverse[c] / mean);
  return weights;
}

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
               AdamState<T>& state, const AdamHyper& hyper) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step", "parameter/gradient count", params.size(), grads.size());
  }
  if (state.first_moment.empty()) {
    for (const Tensor<T>* p : params) {
      state.first_moment.push_back(Tensor<T>::zeros_like(*p));
      state.second_moment.push_back(Tensor<T>::zeros_like(*p));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step", "optimizer state size", state.first_moment.size(), params.size());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != state.first_moment[i].shape()) {
      throw ShapeError("adam_step", "parameter " + std::to_string(i) + " has shape " +
                                        to_string(params[i]->shape()) + " but gradient " +
                                        to_string(grads[i]->shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(hyper.beta1, t);
  const double correction2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->values();
    auto g = grads[i]->values();
    auto m = state.first_moment[i].values();
    auto v = state.second_moment[i].values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = hyper.beta1 * static_cast<double>(m[j]) + (1.0 - hyper.beta1) * gj;
      const double vj = hyper.beta2 * static_cast<double>(v[j]) + (1.0 - hyper.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / correction1;
      const double v_hat = vj / correction2;
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) -
                                hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon));
    }
  }
}

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta)
    : patience_(patience), min_delta_(min_delta) {
  if (patience_ < 1) throw ValueError("EarlyStopping: patience must be at least 1");
}

StopDecision EarlyStopping::update(double metric, const std::function<void()>& on_improvement) {
  if (!std::isfinite(metric)) throw ValueError("EarlyStopping: metric must be finite");
  if (!has_best_ || metric > best_ + min_delta_) {
    has_best_ = true;
    best_ = metric;
    stale_ = 0;
    if (on_improvement) on_improvement();
    return StopDecision::proceed;
  }
  ++stale_;
  return stale_ >= patience_ ? StopDecision::stop : StopDecision::proceed;
}

namespace {

template <typename T>
Tensor<T> gather_rows(const Tensor<float>& images, std::span<const std::size_t> rows) {
  Shape shape = images.shape();
  const std::size_t stride = images.size() / shape[0];
  shape[0] = rows.size();
  std::vector<T> values;
  values.reserve(rows.size() * stride);
  for (std::size_t r : rows) {
    const float* src = images.data() + r * stride;
    for (std::size_t i = 0; i < stride; ++i) values.push_back(static_cast<T>(src[i]));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
double accuracy_on(const ModelGraph<T>& model, const Dataset& data) {
  const auto predictions = model.predict(data.images.template cast<T>());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

}  // namespace

template <typename T>
TrainingHistory train(ModelGraph<T>& model, const Dataset& train, const Dataset& validation,
                      const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train.size() == 0) throw ValueError("train: training set is empty");
  if (validation.size() == 0) throw ValueError("train: validation set is empty");
  train.validate();
  validation.validate();
  const std::size_t k = model.config().class_count;
  if (train.class_count() > k) {
    throw ValueError("train: dataset has " + std::to_string(train.class_count()) +
                     " classes but the model predicts " + std::to_string(k));
  }

  const Tensor<T> weights = config.class_weighting ? compute_class_weights<T>(train.labels, k)
                                                   : Tensor<T>({k}, T{1});
  Prng shuffle_rng(derive_seed(config.seed, {10}));
  Prng dropout_rng(derive_seed(config.seed, {11}));
  const AdamHyper hyper{config.learning_rate, config.beta1, config.beta2, config.adam_epsilon};
  AdamState<T> adam;
  EarlyStopping stopper(config.patience, config.min_delta);

  std::vector<Tensor<T>*> param_values;
  std::vector<Var<T>*> param_vars;
  for (auto& p : model.parameters()) {
    param_vars.push_back(&p.var);
    param_values.push_back(&p.var.value());
  }

  TrainingHistory history;
  ParameterSet<T> best_params = model.parameters();
  double best_seen = -1.0;

  const std::size_t n = train.size();
  const auto epoch_size = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(config.epoch_subsample_fraction * static_cast<double>(n))));
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_in_place(order, shuffle_rng);

    double loss_total = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < epoch_size; begin += config.batch_size) {
      const std::size_t end = std::min(epoch_size, begin + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      std::vector<int> labels;
      labels.reserve(rows.size());
      for (std::size_t r : rows) labels.push_back(train.labels[r]);

      Tape<T> tape;
      const Var<T> input = Var<T>::constant(gather_rows<T>(train.images, rows));
      const Var<T> logits = model.forward(tape, input, ForwardOptions{true, &dropout_rng, true});
      const auto ce = softmax_cross_entropy(tape, logits, labels, &weights);
      const double loss = static_cast<double>(ce.loss.value()[0]);
      if (!std::isfinite(loss)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch starting at " + std::to_string(begin) +
                              "; try a smaller learning rate");
      }
      tape.backward(ce.loss);

      std::vector<const Tensor<T>*> grads;
      grads.reserve(param_vars.size());
      for (Var<T>* v : param_vars) grads.push_back(&v->grad_buffer());
      adam_step<T>(param_values, grads, adam, hyper);

      loss_total += loss * static_cast<double>(rows.size());
      const auto predicted = argmax_rows(logits.value());
      for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == labels[i];
    }

    EpochRecord record{epoch, loss_total / static_cast<double>(epoch_size),
                       static_cast<double>(correct) / static_cast<double>(epoch_size),
                       accuracy_on(model, validation)};
    history.epochs.push_back(record);
    if (on_epoch) on_epoch(record);

    if (record.validation_accuracy > best_seen) {
      best_seen = record.validation_accuracy;
      best_params = model.parameters();
      history.best_epoch = epoch;
    }
    if (stopper.update(record.validation_accuracy) == StopDecision::stop) {
      history.stopped_early = true;
      break;
    }
  }

  for (const auto& p : best_params) model.parameters().at(p.name).value() = p.var.value();
  for (auto& p : model.parameters()) p.var.clear_grad();
  history.best_validation_accuracy = best_seen;
  model.metadata["train_config"] = config.to_json();
  model.metadata["training_seed"] = config.seed;
  model.metadata["best_epoch"] = history.best_epoch;
  model.metadata["best_validation_accuracy"] = best_seen;
  return history;
}

template <typename T>
TrainingHistory train(ModelGraph<T>& model, const Dataset& pool, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  config.validate();
  const auto split = split_validation(pool, config.validation_fraction, derive_seed(config.seed, {12}));
  return train(model, split.train, split.validation, config, on_epoch);
}

void write_history_csv(const TrainingHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "epoch,train_loss,train_acc,val_acc\n";
  char line[128];
  for (const auto& e : history.epochs) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss,
                  e.train_accuracy, e.validation_accuracy);
    out << line;
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

#define ATWB_INSTANTIATE_TRAINER(T)                                                             \
  template Tensor<T> compute_class_weights<T>(std::span<const int>, std::size_t);               \
  template void adam_step<T>(std::span<Tensor<T>* const>, std::span<const Tensor<T>* const>,    \
                             AdamState<T>&, const AdamHyper&);                                  \
  template TrainingHistory train<T>(ModelGraph<T>&, const Dataset&, const Dataset&,             \
                                    const TrainConfig&, const EpochCallback&);                  \
  template TrainingHistory train<T>(ModelGraph<T>&, const Dataset&, const TrainConfig&,         \
                                    const EpochCallback&);

ATWB_INSTANTIATE_TRAINER(float)
ATWB_INSTANTIATE_TRAINER(double)

}  // namespace atwb
