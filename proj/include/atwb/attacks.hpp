#pragma once

#include <atwb/classifier.hpp>
#include <atwb/tensor.hpp>

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace atwb {

struct AttackConfig {
  double epsilon = 0.0;    // l-infinity radius on the [0,1] pixel scale
  std::size_t steps = 40;
  std::optional<double> step_size;  // absolute; unset means relative_step * epsilon / steps
  double relative_step = 2.5;
  bool random_start = true;
  double lower = 0.0;
  double upper = 1.0;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;  // images per gradient batch; fixed so results never depend on workers
  std::size_t workers = 1;

  double resolved_step_size() const;
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct AttackResult {
  double epsilon = 0.0;
  Tensor<T> adversarial;              // [N,C,H,W]
  std::vector<std::uint8_t> success;  // predict(adversarial) != label
  std::vector<double> loss;           // untargeted cross-entropy at the adversarial point
  std::vector<double> linf;           // ||adversarial - clean||_inf per image

  std::size_t size() const noexcept { return success.size(); }
  std::size_t success_count() const;
};

// Clamp into [origin - eps, origin + eps], then into [lower, upper]. Idempotent.
template <typename T>
Tensor<T> project_linf(const Tensor<T>& candidate, const Tensor<T>& origin, double eps,
                       double lower = 0.0, double upper = 1.0);

// Single signed-gradient step: clamp(x + eps * sign(grad_x L), lower, upper).
template <typename T>
AttackResult<T> fgsm(const Classifier<T>& model, const Tensor<T>& images,
                     std::span<const int> labels, double epsilon, double lower = 0.0,
                     double upper = 1.0);

// Iterated projected sign-gradient ascent on the untargeted cross-entropy.
// Returns, per image, the highest-loss iterate among x_1..x_T (x_0 for T = 0).
template <typename T>
AttackResult<T> pgd_linf(const Classifier<T>& model, const Tensor<T>& images,
                         std::span<const int> labels, const AttackConfig& config);

// PGD from a caller-supplied start inside the ball (no random start).
template <typename T>
AttackResult<T> pgd_linf_from(const Classifier<T>& model, const Tensor<T>& images,
                              std::span<const int> labels, const Tensor<T>& start,
                              const AttackConfig& config);

// Clean "attack" at radius 0: adversarial == images.
template <typename T>
AttackResult<T> clean_result(const Classifier<T>& model, const Tensor<T>& images,
                             std::span<const int> labels);

// Strictly increasing radii starting at 0 (the clean evaluation).
struct EpsilonSchedule {
  std::vector<double> radii;

  static EpsilonSchedule default_schedule();
  // "default" or a comma-separated list of radii.
  static EpsilonSchedule parse(const std::string& text);
  void validate() const;
};

// For every radius after the first, PGD runs from a fresh random start and
// warm-started from the previous radius's adversarial points; per image the
// previous point, the warm result and the fresh result compete, successful
// attacks first, then higher loss. Images already misclassified at the
// previous radius keep that point and are not attacked again. Success is
// therefore monotone in epsilon.
template <typename T>
std::vector<AttackResult<T>> attack_sweep(const Classifier<T>& model, const Tensor<T>& images,
                                          std::span<const int> labels,
                                          const EpsilonSchedule& schedule,
                                          const AttackConfig& config);

}  // namespace atwb
