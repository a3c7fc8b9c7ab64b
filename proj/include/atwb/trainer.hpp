#pragma once

#include <atwb/dataset.hpp>
#include <atwb/model.hpp>

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace atwb {

struct TrainConfig {
  double learning_rate = 0.01;
  double adam_epsilon = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t max_epochs = 300;
  std::size_t patience = 40;
  double min_delta = 0.001;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double epoch_subsample_fraction = 1.0;
  double validation_fraction = 0.2;
  bool class_weighting = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Inverse-frequency weights normalized to mean 1. Every class must occur.
template <typename T>
Tensor<T> compute_class_weights(std::span<const int> labels, std::size_t class_count);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;
};

struct AdamHyper {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 0.1;
};

// Bias-corrected Adam; epsilon is added to sqrt(v_hat):
//   theta -= lr * m_hat / (sqrt(v_hat) + epsilon)
// `grads[i]` pairs with `params[i]`. Moments are allocated on the first step.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
               AdamState<T>& state, const AdamHyper& hyper);

enum class StopDecision { proceed, stop };

// Patience rule: a metric improves when it exceeds best + min_delta. After
// `patience` consecutive epochs without improvement the decision is stop.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta);

  // `on_improvement` runs when the metric improves (e.g. to snapshot weights).
  StopDecision update(double metric, const std::function<void()>& on_improvement = {});

  bool has_best() const noexcept { return has_best_; }
  double best_metric() const noexcept { return best_; }
  std::size_t epochs_since_improvement() const noexcept { return stale_; }

 private:
  std::size_t patience_;
  double min_delta_;
  bool has_best_ = false;
  double best_ = 0.0;
  std::size_t stale_ = 0;
};

struct EpochRecord {
  std::size_t epoch;
  double train_loss;
  double train_accuracy;
  double validation_accuracy;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation_accuracy = 0.0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place on `train`, monitoring unweighted accuracy on `validation`.
// Restores the weights of the epoch with the highest validation accuracy.
template <typename T>
TrainingHistory train(ModelGraph<T>& model, const Dataset& train, const Dataset& validation,
                      const TrainConfig& config, const EpochCallback& on_epoch = {});

// Splits `pool` 80/20 (config.validation_fraction) by seeded shuffle, then trains.
template <typename T>
TrainingHistory train(ModelGraph<T>& model, const Dataset& pool, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

// CSV: epoch,train_loss,train_acc,val_acc
void write_history_csv(const TrainingHistory& history, const std::filesystem::path& path);

}  // namespace atwb
