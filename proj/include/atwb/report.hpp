#pragma once

#include <atwb/attacks.hpp>
#include <atwb/dataset.hpp>
#include <atwb/model.hpp>

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace atwb {

// Per-sample (micro) accuracy: fraction of exact matches.
double unweighted_accuracy(std::span<const int> predictions, std::span<const int> labels);

// Class-balanced (macro) accuracy: mean of per-class recalls over classes present in `labels`.
double macro_accuracy(std::span<const int> predictions, std::span<const int> labels);

enum class AccuracyKind { micro, macro };

struct CurvePoint {
  double epsilon = 0.0;
  double accuracy = 0.0;
  std::size_t sample_count = 0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct RobustnessCurve {
  std::string model_id;
  std::string label;  // legend text, normally the head kind
  std::vector<CurvePoint> points;
  nlohmann::json attack_config = nlohmann::json::object();

  std::vector<double> epsilons() const;
  void validate() const;
};

template <typename T>
RobustnessCurve robustness_curve(const ModelGraph<T>& model, const Dataset& dataset,
                                 const EpsilonSchedule& schedule, const AttackConfig& config,
                                 AccuracyKind kind = AccuracyKind::micro);

// Builds a curve from sweep results that were already computed.
template <typename T>
RobustnessCurve curve_from_sweep(const std::vector<AttackResult<T>>& sweep,
                                 std::span<const int> labels, AccuracyKind kind = AccuracyKind::micro);

// Columns epsilon,accuracy,n with 6 significant digits.
std::string format_curve_csv(const RobustnessCurve& curve);
void write_curve_csv(const RobustnessCurve& curve, const std::filesystem::path& path);
RobustnessCurve parse_curve_csv(const std::string& text);
RobustnessCurve read_curve_csv(const std::filesystem::path& path);

struct RenderOptions {
  bool log_epsilon = false;
  std::string title = "Accuracy under l-infinity PGD";
};

struct Report {
  std::vector<RobustnessCurve> curves;
  nlohmann::json metadata = nlohmann::json::object();
  RenderOptions render;

  void validate() const;  // at least one curve, all sharing one schedule
};

// Fixed 800x500 SVG 1.1 with one polyline per curve.
std::string render_svg(const Report& report);
void write_svg(const Report& report, const std::filesystem::path& path);

// Hex SHA-1 of "blob <size>\0" + contents, as git computes it.
std::string git_blob_hash(std::span<const std::uint8_t> bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

}  // namespace atwb
