#include <atwb/attacks.hpp>

#include <atwb/error.hpp>
#include <atwb/ops.hpp>
#include <atwb/prng.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace atwb {

double AttackConfig::resolved_step_size() const {
  if (step_size) return *step_size;
  return steps == 0 ? 0.0 : relative_step * epsilon / static_cast<double>(steps);
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ValueError("AttackConfig: epsilon must be non-negative");
  if (epsilon > 1.0) throw ValueError("AttackConfig: epsilon must not exceed 1");
  if (!(lower < upper)) throw ValueError("AttackConfig: bounds must satisfy lower < upper");
  if (step_size && !(*step_size >= 0.0)) throw ValueError("AttackConfig: step_size must be non-negative");
  if (!(relative_step > 0.0)) throw ValueError("AttackConfig: relative_step must be positive");
  if (steps > 0 && epsilon > 0.0 && !(resolved_step_size() > 0.0)) {
    throw ValueError("AttackConfig: step size must be positive when steps > 0");
  }
  if (batch_size == 0) throw ValueError("AttackConfig: batch_size must be positive");
  if (workers == 0) throw ValueError("AttackConfig: workers must be positive");
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j{{"epsilon", epsilon},
                   {"steps", steps},
                   {"relative_step", relative_step},
                   {"random_start", random_start},
                   {"lower", lower},
                   {"upper", upper},
                   {"seed", seed},
                   {"batch_size", batch_size},
                   {"loss", "untargeted cross-entropy"}};
  j["step_size"] = step_size ? nlohmann::json(*step_size) : nlohmann::json(nullptr);
  return j;
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.epsilon = j.at("epsilon").get<double>();
  c.steps = j.at("steps").get<std::size_t>();
  c.relative_step = j.at("relative_step").get<double>();
  c.random_start = j.at("random_start").get<bool>();
  c.lower = j.at("lower").get<double>();
  c.upper = j.at("upper").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("step_size") && !j.at("step_size").is_null()) c.step_size = j.at("step_size").get<double>();
  c.validate();
  return c;
}

template <typename T>
std::size_t AttackResult<T>::success_count() const {
  return static_cast<std::size_t>(std::count(success.begin(), success.end(), std::uint8_t{1}));
}

template <typename T>
Tensor<T> project_linf(const Tensor<T>& candidate, const Tensor<T>& origin, double eps,
                       double lower, double upper) {
  if (candidate.shape() != origin.shape()) {
    throw ShapeError("project_linf", "candidate " + to_string(candidate.shape()) +
                                         " and origin " + to_string(origin.shape()) + " differ");
  }
  const T e = static_cast<T>(eps);
  const T lo = static_cast<T>(lower);
  const T hi = static_cast<T>(upper);
  Tensor<T> out = candidate;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T o = origin[i];
    T v = std::clamp(out[i], static_cast<T>(o - e), static_cast<T>(o + e));
    out[i] = std::clamp(v, lo, hi);
  }
  return out;
}

namespace {

template <typename T>
struct LossGradient {
  Tensor<T> grad;
  std::vector<double> loss;
};

template <typename T>
LossGradient<T> loss_gradient(const Classifier<T>& model, const Tensor<T>& x,
                              std::span<const int> labels) {
  Tape<T> tape;
  Var<T> input = Var<T>::leaf(x, true);
  const Var<T> logits = model.logits(tape, input);
  const auto ce = softmax_cross_entropy<T>(tape, logits, labels, nullptr, Reduction::sum);
  tape.backward(ce.loss);
  LossGradient<T> out{input.grad(), cross_entropy_per_row(logits.value(), labels)};
  for (T g : out.grad.values()) {
    if (!std::isfinite(static_cast<double>(g))) throw Error("attack: non-finite input gradient");
  }
  return out;
}

template <typename T>
Tensor<T> eval_logits(const Classifier<T>& model, const Tensor<T>& x) {
  Tape<T> tape;
  return model.logits(tape, Var<T>::constant(x)).value();
}

template <typename T>
T sign_of(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

void check_batch(const std::string& op, const Shape& shape, std::size_t labels) {
  if (shape.size() != 4) throw ShapeError(op, "expected an NCHW batch, got " + to_string(shape));
  if (shape[0] != labels) throw ShapeError(op, "N (images vs labels)", shape[0], labels);
}

// Runs fn(begin, end) over fixed chunks, optionally on several threads.
template <typename Fn>
void for_each_chunk(std::size_t n, std::size_t chunk, std::size_t workers, Fn&& fn) {
  const std::size_t chunks = (n + chunk - 1) / chunk;
  if (workers <= 1 || chunks <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, chunks); ++w) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < chunks; c = next++) {
        try {
          fn(c * chunk, std::min(n, (c + 1) * chunk));
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Per-chunk result assembly into a preallocated AttackResult.
template <typename T>
void finalize(const Classifier<T>& model, const Tensor<T>& clean, const Tensor<T>& adversarial,
              std::span<const int> labels, std::size_t offset, AttackResult<T>& result) {
  const Tensor<T> logits = eval_logits(model, adversarial);
  const auto predictions = argmax_rows(logits);
  const auto losses = cross_entropy_per_row(logits, labels);
  const std::size_t stride = clean.size() / clean.dim(0);
  std::copy(adversarial.values().begin(), adversarial.values().end(),
            result.adversarial.data() + offset * stride);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    result.success[offset + i] = predictions[i] != labels[i];
    result.loss[offset + i] = losses[i];
    double linf = 0.0;
    for (std::size_t p = 0; p < stride; ++p) {
      linf = std::max(linf, std::abs(static_cast<double>(adversarial[i * stride + p]) -
                                     static_cast<double>(clean[i * stride + p])));
    }
    result.linf[offset + i] = linf;
  }
}

template <typename T>
AttackResult<T> empty_result(const Tensor<T>& images, double epsilon) {
  AttackResult<T> r;
  r.epsilon = epsilon;
  r.adversarial = Tensor<T>::zeros_like(images);
  r.success.assign(images.dim(0), 0);
  r.loss.assign(images.dim(0), 0.0);
  r.linf.assign(images.dim(0), 0.0);
  return r;
}

// PGD over one chunk. `start` is the initial iterate (already inside the ball).
template <typename T>
Tensor<T> pgd_chunk(const Classifier<T>& model, const Tensor<T>& clean, std::span<const int> labels,
                    Tensor<T> start, const AttackConfig& config) {
  if (config.epsilon == 0.0 || config.steps == 0) return start;
  const T alpha = static_cast<T>(config.resolved_step_size());
  const std::size_t n = labels.size();
  const std::size_t stride = clean.size() / n;
  Tensor<T> current = std::move(start);
  Tensor<T> best = current;
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());

  auto consider = [&](const Tensor<T>& iterate, const std::vector<double>& losses) {
    for (std::size_t i = 0; i < n; ++i) {
      if (losses[i] > best_loss[i]) {
        best_loss[i] = losses[i];
        std::copy_n(iterate.data() + i * stride, stride, best.data() + i * stride);
      }
    }
  };

  for (std::size_t t = 1; t <= config.steps; ++t) {
    const auto step = loss_gradient(model, current, labels);
    if (t >= 2) consider(current, step.loss);
    Tensor<T> moved = current;
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += alpha * sign_of(step.grad[i]);
    current = project_linf(moved, clean, config.epsilon, config.lower, config.upper);
  }
  consider(current, cross_entropy_per_row(eval_logits(model, current), labels));
  return best;
}

// Each image's start is drawn from its own stream keyed by its id, so the
// start does not depend on batching or on which other images are attacked.
template <typename T>
Tensor<T> random_start(const Tensor<T>& clean, std::span<const std::size_t> ids,
                       const AttackConfig& config) {
  const std::size_t n = clean.dim(0);
  const std::size_t stride = clean.size() / n;
  Tensor<T> start = clean;
  for (std::size_t i = 0; i < n; ++i) {
    Prng rng(derive_seed(config.seed, {ids[i]}));
    for (std::size_t p = 0; p < stride; ++p) {
      start[i * stride + p] += static_cast<T>(rng.uniform(-config.epsilon, config.epsilon));
    }
  }
  return project_linf(start, clean, config.epsilon, config.lower, config.upper);
}

template <typename T>
AttackResult<T> run_pgd(const Classifier<T>& model, const Tensor<T>& images,
                        std::span<const int> labels, const Tensor<T>* warm_start,
                        const AttackConfig& config, std::span<const std::size_t> ids = {}) {
  config.validate();
  std::vector<std::size_t> default_ids;
  if (ids.empty()) {
    default_ids.resize(labels.size());
    std::iota(default_ids.begin(), default_ids.end(), std::size_t{0});
    ids = default_ids;
  }
  check_batch("pgd_linf", images.shape(), labels.size());
  if (warm_start && warm_start->shape() != images.shape()) {
    throw ShapeError("pgd_linf", "warm start shape " + to_string(warm_start->shape()) +
                                     " differs from " + to_string(images.shape()));
  }
  AttackResult<T> result = empty_result(images, config.epsilon);
  for_each_chunk(labels.size(), config.batch_size, config.workers,
                 [&](std::size_t begin, std::size_t end) {
                   const Tensor<T> clean = images.slice_rows(begin, end);
                   const auto chunk_labels = labels.subspan(begin, end - begin);
                   Tensor<T> start;
                   if (warm_start) {
                     start = project_linf(warm_start->slice_rows(begin, end), clean, config.epsilon,
                                          config.lower, config.upper);
                   } else if (config.random_start && config.epsilon > 0.0) {
                     start = random_start(clean, ids.subspan(begin, end - begin), config);
                   } else {
                     start = clean;
                   }
                   const Tensor<T> adv = pgd_chunk(model, clean, chunk_labels, std::move(start), config);
                   finalize(model, clean, adv, chunk_labels, begin, result);
                 });
  return result;
}

}  // namespace

template <typename T>
AttackResult<T> fgsm(const Classifier<T>& model, const Tensor<T>& images,
                     std::span<const int> labels, double epsilon, double lower, double upper) {
  if (!(epsilon >= 0.0)) throw ValueError("fgsm: epsilon must be non-negative");
  check_batch("fgsm", images.shape(), labels.size());
  const auto step = loss_gradient(model, images, labels);
  const T e = static_cast<T>(epsilon);
  Tensor<T> adv = images;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    adv[i] = std::clamp(static_cast<T>(adv[i] + e * sign_of(step.grad[i])), static_cast<T>(lower),
                        static_cast<T>(upper));
  }
  AttackResult<T> result = empty_result(images, epsilon);
  finalize(model, images, adv, labels, 0, result);
  return result;
}

template <typename T>
AttackResult<T> pgd_linf(const Classifier<T>& model, const Tensor<T>& images,
                         std::span<const int> labels, const AttackConfig& config) {
  return run_pgd<T>(model, images, labels, nullptr, config);
}

template <typename T>
AttackResult<T> pgd_linf_from(const Classifier<T>& model, const Tensor<T>& images,
                              std::span<const int> labels, const Tensor<T>& start,
                              const AttackConfig& config) {
  return run_pgd<T>(model, images, labels, &start, config);
}

template <typename T>
AttackResult<T> clean_result(const Classifier<T>& model, const Tensor<T>& images,
                             std::span<const int> labels) {
  check_batch("clean_result", images.shape(), labels.size());
  AttackResult<T> result = empty_result(images, 0.0);
  const std::size_t chunk = AttackConfig{}.batch_size;
  for (std::size_t begin = 0; begin < labels.size(); begin += chunk) {
    const std::size_t end = std::min(labels.size(), begin + chunk);
    const Tensor<T> clean = images.slice_rows(begin, end);
    finalize(model, clean, clean, labels.subspan(begin, end - begin), begin, result);
  }
  return result;
}

EpsilonSchedule EpsilonSchedule::default_schedule() {
  return {{0.0, 0.00125, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32}};
}

EpsilonSchedule EpsilonSchedule::parse(const std::string& text) {
  if (text == "default") return default_schedule();
  EpsilonSchedule schedule;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      schedule.radii.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ValueError("schedule: '" + item + "' is not a number (use 'default' or e.g. 0,0.01,0.02)");
    }
  }
  schedule.validate();
  return schedule;
}

void EpsilonSchedule::validate() const {
  if (radii.empty()) throw ValueError("schedule: no radii given");
  if (radii.front() != 0.0) throw ValueError("schedule: the first radius must be 0 (clean evaluation)");
  for (std::size_t i = 1; i < radii.size(); ++i) {
    if (!(radii[i] > radii[i - 1])) throw ValueError("schedule: radii must be strictly increasing");
  }
  if (radii.back() > 1.0) throw ValueError("schedule: radii must not exceed 1");
}

template <typename T>
std::vector<AttackResult<T>> attack_sweep(const Classifier<T>& model, const Tensor<T>& images,
                                          std::span<const int> labels,
                                          const EpsilonSchedule& schedule,
                                          const AttackConfig& config) {
  schedule.validate();
  std::vector<AttackResult<T>> results;
  results.push_back(clean_result(model, images, labels));
  const std::size_t stride = images.size() / images.dim(0);
  for (std::size_t r = 1; r < schedule.radii.size(); ++r) {
    AttackConfig step_config = config;
    step_config.epsilon = schedule.radii[r];
    step_config.seed = derive_seed(config.seed, {r});
    const AttackResult<T>& previous = results.back();
    AttackResult<T> chosen = previous;
    chosen.epsilon = schedule.radii[r];

    // Points that already fool the model stay adversarial inside the larger ball.
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!previous.success[i]) active.push_back(i);
    }
    if (active.empty()) {
      results.push_back(std::move(chosen));
      continue;
    }
    std::vector<T> clean_values, warm_values;
    std::vector<int> active_labels;
    for (std::size_t i : active) {
      clean_values.insert(clean_values.end(), images.data() + i * stride, images.data() + (i + 1) * stride);
      warm_values.insert(warm_values.end(), previous.adversarial.data() + i * stride,
                         previous.adversarial.data() + (i + 1) * stride);
      active_labels.push_back(labels[i]);
    }
    Shape shape = images.shape();
    shape[0] = active.size();
    const Tensor<T> clean(shape, std::move(clean_values));
    const Tensor<T> warm_start(shape, std::move(warm_values));

    const AttackResult<T> fresh = run_pgd<T>(model, clean, active_labels, nullptr, step_config, active);
    AttackConfig warm_config = step_config;
    warm_config.random_start = false;
    const AttackResult<T> warm = run_pgd<T>(model, clean, active_labels, &warm_start, warm_config, active);

    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      for (const AttackResult<T>* candidate : {&warm, &fresh}) {
        const bool better = candidate->success[a] > chosen.success[i] ||
                            (candidate->success[a] == chosen.success[i] &&
                             candidate->loss[a] > chosen.loss[i]);
        if (!better) continue;
        chosen.success[i] = candidate->success[a];
        chosen.loss[i] = candidate->loss[a];
        chosen.linf[i] = candidate->linf[a];
        std::copy_n(candidate->adversarial.data() + a * stride, stride, chosen.adversarial.data() + i * stride);
      }
    }
    results.push_back(std::move(chosen));
  }
  return results;
}

#define ATWB_INSTANTIATE_ATTACKS(T)                                                             \
  template struct AttackResult<T>;                                                              \
  template Tensor<T> project_linf(const Tensor<T>&, const Tensor<T>&, double, double, double);  \
  template AttackResult<T> fgsm(const Classifier<T>&, const Tensor<T>&, std::span<const int>,   \
                                double, double, double);                                        \
  template AttackResult<T> pgd_linf(const Classifier<T>&, const Tensor<T>&,                     \
                                    std::span<const int>, const AttackConfig&);                 \
  template AttackResult<T> pgd_linf_from(const Classifier<T>&, const Tensor<T>&,                \
                                         std::span<const int>, const Tensor<T>&,                \
                                         const AttackConfig&);                                  \
  template AttackResult<T> clean_result(const Classifier<T>&, const Tensor<T>&,                 \
                                        std::span<const int>);                                  \
  template std::vector<AttackResult<T>> attack_sweep(const Classifier<T>&, const Tensor<T>&,    \
                                                     std::span<const int>,                      \
                                                     const EpsilonSchedule&, const AttackConfig&);

ATWB_INSTANTIATE_ATTACKS(float)
ATWB_INSTANTIATE_ATTACKS(double)

}  // namespace atwb
