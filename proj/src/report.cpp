#include <atwb/report.hpp>

#include <atwb/container.hpp>
#include <atwb/error.hpp>

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace atwb {
namespace {

void check_pair(std::span<const int> predictions, std::span<const int> labels, const char* op) {
  if (predictions.empty()) throw ValueError(std::string(op) + ": empty input");
  if (predictions.size() != labels.size()) {
    throw ShapeError(op, "prediction count", labels.size(), predictions.size());
  }
}

std::string format_number(const char* fmt, double v) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, fmt, v);
  return buffer;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

double unweighted_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_pair(predictions, labels, "unweighted_accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double macro_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_pair(predictions, labels, "macro_accuracy");
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // label -> (correct, total)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [correct, total] = per_class[labels[i]];
    correct += predictions[i] == labels[i];
    ++total;
  }
  double sum = 0.0;
  for (const auto& [label, counts] : per_class) {
    sum += static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  return sum / static_cast<double>(per_class.size());
}

std::vector<double> RobustnessCurve::epsilons() const {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(p.epsilon);
  return out;
}

void RobustnessCurve::validate() const {
  if (points.empty()) throw ValueError("RobustnessCurve: no points");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.accuracy >= 0.0 && p.accuracy <= 1.0)) throw ValueError("RobustnessCurve: accuracy outside [0,1]");
    if (i > 0 && !(p.epsilon > points[i - 1].epsilon)) {
      throw ValueError("RobustnessCurve: epsilons must be strictly increasing");
    }
  }
}

template <typename T>
RobustnessCurve curve_from_sweep(const std::vector<AttackResult<T>>& sweep, std::span<const int> labels,
                                 AccuracyKind kind) {
  RobustnessCurve curve;
  for (const auto& result : sweep) {
    if (result.size() != labels.size()) {
      throw ShapeError("curve_from_sweep", "result size", labels.size(), result.size());
    }
    // Only correctness matters for either accuracy kind; -1 never equals a label.
    std::vector<int> predictions(labels.begin(), labels.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (result.success[i]) predictions[i] = -1;
    }
    const double acc = kind == AccuracyKind::micro ? unweighted_accuracy(predictions, labels)
                                                   : macro_accuracy(predictions, labels);
    curve.points.push_back({result.epsilon, acc, labels.size()});
  }
  curve.validate();
  return curve;
}

template <typename T>
RobustnessCurve robustness_curve(const ModelGraph<T>& model, const Dataset& dataset,
                                 const EpsilonSchedule& schedule, const AttackConfig& config,
                                 AccuracyKind kind) {
  if (dataset.size() == 0) throw ValueError("robustness_curve: empty dataset");
  const Tensor<T> images = dataset.images.template cast<T>();
  const auto sweep = attack_sweep<T>(model, images, dataset.labels, schedule, config);
  RobustnessCurve curve = curve_from_sweep(sweep, dataset.labels, kind);
  curve.label = to_string(model.config().head);
  curve.attack_config = config.to_json();
  curve.attack_config["schedule"] = schedule.radii;
  curve.attack_config["accuracy"] = kind == AccuracyKind::micro ? "micro" : "macro";
  return curve;
}

std::string format_curve_csv(const RobustnessCurve& curve) {
  std::string out = "epsilon,accuracy,n\n";
  for (const auto& p : curve.points) {
    out += format_number("%.6g", p.epsilon) + ',' + format_number("%.6g", p.accuracy) + ',' +
           std::to_string(p.sample_count) + '\n';
  }
  return out;
}

void write_curve_csv(const RobustnessCurve& curve, const std::filesystem::path& path) {
  write_text(path, format_curve_csv(curve));
}

RobustnessCurve parse_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "epsilon,accuracy,n") {
    throw FormatError("curve CSV: expected header 'epsilon,accuracy,n'");
  }
  RobustnessCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find(',');
    const auto b = a == std::string::npos ? a : line.find(',', a + 1);
    if (b == std::string::npos) throw FormatError("curve CSV: malformed row '" + line + "'");
    try {
      CurvePoint p;
      p.epsilon = std::stod(line.substr(0, a));
      p.accuracy = std::stod(line.substr(a + 1, b - a - 1));
      p.sample_count = std::stoul(line.substr(b + 1));
      curve.points.push_back(p);
    } catch (const std::logic_error&) {
      throw FormatError("curve CSV: malformed row '" + line + "'");
    }
  }
  curve.validate();
  return curve;
}

RobustnessCurve read_curve_csv(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_curve_csv(std::string(bytes.begin(), bytes.end()));
}

void Report::validate() const {
  if (curves.empty()) throw ValueError("Report: no curves");
  for (const auto& c : curves) {
    c.validate();
    if (c.epsilons() != curves.front().epsilons()) {
      throw ValueError("Report: curves '" + curves.front().label + "' and '" + c.label +
                       "' use different schedules");
    }
  }
}

namespace {

constexpr double kWidth = 800, kHeight = 500;
constexpr double kLeft = 80, kRight = 170, kTop = 50, kBottom = 70;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) { return format_number("%.2f", v); }

}  // namespace

std::string render_svg(const Report& report) {
  report.validate();
  const auto eps = report.curves.front().epsilons();
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;

  // On the log axis, epsilon 0 is drawn one decade below the smallest positive radius.
  double log_floor = 0.0;
  if (report.render.log_epsilon) {
    double smallest = 0.0;
    for (double e : eps) {
      if (e > 0.0) {
        smallest = e;
        break;
      }
    }
    if (smallest == 0.0) smallest = 1.0;
    log_floor = smallest / 10.0;
  }
  auto transform = [&](double e) {
    return report.render.log_epsilon ? std::log10(std::max(e, log_floor)) : e;
  };
  const double x_lo = transform(eps.front());
  double x_hi = transform(eps.back());
  if (x_hi == x_lo) x_hi = x_lo + 1.0;
  auto px = [&](double e) { return kLeft + (transform(e) - x_lo) / (x_hi - x_lo) * plot_w; };
  auto py = [&](double acc) { return kTop + (1.0 - acc) * plot_h; };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"800\" height=\"500\" "
         "viewBox=\"0 0 800 500\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"500\" fill=\"white\"/>\n"
      << "<text x=\"" << fmt(kLeft + plot_w / 2) << "\" y=\"28\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"16\">" << escape_xml(report.render.title) << "</text>\n";

  // Axes and ticks.
  svg << "<g stroke=\"black\" stroke-width=\"1\" fill=\"none\">\n"
      << "<line x1=\"" << fmt(kLeft) << "\" y1=\"" << fmt(kTop + plot_h) << "\" x2=\"" << fmt(kLeft + plot_w)
      << "\" y2=\"" << fmt(kTop + plot_h) << "\"/>\n"
      << "<line x1=\"" << fmt(kLeft) << "\" y1=\"" << fmt(kTop) << "\" x2=\"" << fmt(kLeft) << "\" y2=\""
      << fmt(kTop + plot_h) << "\"/>\n"
      << "</g>\n";
  svg << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double acc = i / 5.0;
    svg << "<line x1=\"" << fmt(kLeft - 5) << "\" y1=\"" << fmt(py(acc)) << "\" x2=\"" << fmt(kLeft)
        << "\" y2=\"" << fmt(py(acc)) << "\" stroke=\"black\"/>"
        << "<text x=\"" << fmt(kLeft - 8) << "\" y=\"" << fmt(py(acc) + 4) << "\" text-anchor=\"end\">"
        << format_number("%.1f", acc) << "</text>\n";
  }
  for (double e : eps) {
    svg << "<line x1=\"" << fmt(px(e)) << "\" y1=\"" << fmt(kTop + plot_h) << "\" x2=\"" << fmt(px(e))
        << "\" y2=\"" << fmt(kTop + plot_h + 5) << "\" stroke=\"black\"/>"
        << "<text x=\"" << fmt(px(e)) << "\" y=\"" << fmt(kTop + plot_h + 18)
        << "\" text-anchor=\"end\" transform=\"rotate(-35 " << fmt(px(e)) << ' ' << fmt(kTop + plot_h + 18)
        << ")\">" << format_number("%g", e) << "</text>\n";
  }
  svg << "</g>\n";
  svg << "<text x=\"" << fmt(kLeft + plot_w / 2) << "\" y=\"" << fmt(kHeight - 12)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << (report.render.log_epsilon ? "epsilon (log scale)" : "epsilon") << "</text>\n"
      << "<text x=\"20\" y=\"" << fmt(kTop + plot_h / 2) << "\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 20 " << fmt(kTop + plot_h / 2)
      << ")\">accuracy</text>\n";

  for (std::size_t c = 0; c < report.curves.size(); ++c) {
    const auto& curve = report.curves[c];
    const char* colour = kPalette[c % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
      if (i) svg << ' ';
      svg << fmt(px(curve.points[i].epsilon)) << ',' << fmt(py(curve.points[i].accuracy));
    }
    svg << "\"/>\n";
    const double ly = kTop + 20 + 22 * static_cast<double>(c);
    const double lx = kLeft + plot_w + 20;
    svg << "<line x1=\"" << fmt(lx) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(lx + 24) << "\" y2=\""
        << fmt(ly) << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>"
        << "<text x=\"" << fmt(lx + 30) << "\" y=\"" << fmt(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"12\">"
        << escape_xml(curve.label.empty() ? curve.model_id : curve.label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_svg(const Report& report, const std::filesystem::path& path) {
  write_text(path, render_svg(report));
}

std::string git_blob_hash(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &length) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("git_blob_hash: SHA-1 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xf];
  }
  return out;
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return git_blob_hash(bytes);
}

template RobustnessCurve robustness_curve(const ModelGraph<float>&, const Dataset&, const EpsilonSchedule&,
                                          const AttackConfig&, AccuracyKind);
template RobustnessCurve robustness_curve(const ModelGraph<double>&, const Dataset&, const EpsilonSchedule&,
                                          const AttackConfig&, AccuracyKind);
template RobustnessCurve curve_from_sweep(const std::vector<AttackResult<float>>&, std::span<const int>,
                                          AccuracyKind);
template RobustnessCurve curve_from_sweep(const std::vector<AttackResult<double>>&, std::span<const int>,
                                          AccuracyKind);

}  // namespace atwb
