#include <atwb/cli.hpp>

#include <atwb/attacks.hpp>
#include <atwb/container.hpp>
#include <atwb/dataset.hpp>
#include <atwb/error.hpp>
#include <atwb/explain.hpp>
#include <atwb/model_io.hpp>
#include <atwb/report.hpp>
#include <atwb/synth.hpp>
#include <atwb/trainer.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace atwb::cli {
namespace fs = std::filesystem;

fs::path output_root() {
  const char* env = std::getenv("ATWB_OUTPUT_ROOT");
  return (env && *env) ? fs::path(env) : fs::path("atwb-out");
}

namespace {

void progress(const std::string& line) { std::cerr << line << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Re-runnable config: `atwb <cmd> --config <file>` reproduces the run.
void write_resolved_config(const CLI::App& command, const fs::path& path) {
  write_text(path, "[" + command.get_name() + "]\n" + command.config_to_str(true, false));
}

nlohmann::json command_provenance(const CLI::App& command) {
  return {{"command", command.get_name()}, {"resolved_config", command.config_to_str(true, false)}};
}

// A directory holding images.atwb is used as is; otherwise its `split` subdirectory.
fs::path resolve_split(const fs::path& data, const std::string& split) {
  if (fs::exists(data / "images.atwb")) return data;
  const fs::path nested = data / split;
  if (fs::exists(nested / "images.atwb")) return nested;
  throw ValueError("no dataset found at '" + data.string() + "' or '" + nested.string() +
                   "' (create one with `atwb synth --out " + data.string() + "`)");
}

Dataset load_limited(const fs::path& dir, std::size_t limit) {
  Dataset data = load_dataset(dir);
  if (limit == 0 || limit >= data.size()) return data;
  std::vector<std::size_t> indices(limit);
  for (std::size_t i = 0; i < limit; ++i) indices[i] = i;
  return data.subset(indices);
}

std::string format_double(double v) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%.6g", v);
  return buffer;
}

struct AttackFlags {
  std::size_t steps = 40;
  std::optional<double> step_size;
  double relative_step = 2.5;
  bool no_random_start = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--steps", steps, "PGD iterations per radius");
    cmd->add_option("--step-size", step_size, "Absolute PGD step (default: relative-step * eps / steps)");
    cmd->add_option("--relative-step", relative_step, "Step size as a multiple of eps / steps");
    cmd->add_flag("--no-random-start", no_random_start, "Start PGD at the clean image");
    cmd->add_option("--seed", seed, "Seed for random starts");
    cmd->add_option("--workers", workers, "Worker threads; results do not depend on this")
        ->check(CLI::PositiveNumber);
  }

  AttackConfig config() const {
    AttackConfig c;
    c.steps = steps;
    c.step_size = step_size;
    c.relative_step = relative_step;
    c.random_start = !no_random_start;
    c.seed = seed;
    c.workers = workers;
    return c;
  }
};

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  SynthConfig config;
};

void cmd_synth(const CLI::App& command, SynthArgs& args) {
  if (args.out.empty()) args.out = output_root() / "data";
  args.config.validate();
  progress("synth: generating " + std::to_string(args.config.n_train) + " train / " +
           std::to_string(args.config.n_test) + " test images");
  const auto splits = generate_synthetic(args.config);
  save_dataset(splits.train, args.out / "train");
  if (args.config.n_test > 0) save_dataset(splits.test, args.out / "test");
  write_resolved_config(command, args.out / "synth.ini");
  progress("synth: wrote " + args.out.string());
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  fs::path data;
  std::string split = "train";
  fs::path out;
  std::string head = "baseline";
  std::optional<std::uint64_t> init_seed;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t blocks = 2;
  std::size_t attention_heads = 16;
  double dropout = 0.5;
  bool no_class_weights = false;
  TrainConfig config;
};

void cmd_train(const CLI::App& command, TrainArgs& args) {
  const HeadKind head = parse_head_kind(args.head);
  if (args.out.empty()) args.out = output_root() / (args.head + ".atwb");
  const Dataset pool = load_dataset(resolve_split(args.data, args.split));

  ModelConfig mc;
  mc.channels = pool.images.dim(1);
  mc.height = pool.images.dim(2);
  mc.width = pool.images.dim(3);
  mc.class_count = pool.class_count();
  mc.head = head;
  mc.stage_channels = args.stage_channels;
  mc.blocks_per_stage = args.blocks;
  mc.attention_heads = args.attention_heads;
  mc.dropout_p = args.dropout;
  mc.init_seed = args.init_seed.value_or(args.config.seed);
  mc.validate();
  args.config.class_weighting = !args.no_class_weights;
  args.config.validate();

  ModelGraph<float> model(mc);
  progress("train: " + args.head + " head, " + std::to_string(model.parameter_count()) + " parameters, " +
           std::to_string(pool.size()) + " images");
  const TrainingHistory history = train(model, pool, args.config, [](const EpochRecord& r) {
    progress("  epoch " + std::to_string(r.epoch) + "  loss " + format_double(r.train_loss) + "  train_acc " +
             format_double(r.train_accuracy) + "  val_acc " + format_double(r.validation_accuracy));
  });
  model.metadata["dataset"] = pool.provenance;
  model.metadata["provenance"] = command_provenance(command);
  save_model(model, args.out);

  fs::path history_path = args.out;
  history_path.replace_extension(".history.csv");
  write_history_csv(history, history_path);
  fs::path config_path = args.out;
  config_path.replace_extension(".train.ini");
  write_resolved_config(command, config_path);
  progress("train: best val_acc " + format_double(history.best_validation_accuracy) + " at epoch " +
           std::to_string(history.best_epoch) + "; wrote " + args.out.string());
}

// ---- attack ---------------------------------------------------------------

struct AttackArgs {
  fs::path model;
  fs::path data;
  std::string split = "test";
  fs::path out;
  double epsilon = 0.0;
  std::size_t limit = 0;
  AttackFlags attack;
};

void cmd_attack(const CLI::App& command, AttackArgs& args) {
  if (args.out.empty()) args.out = output_root() / "attack";
  AttackConfig config = args.attack.config();
  config.epsilon = args.epsilon;
  config.validate();
  const ModelGraph<float> model = load_model<float>(args.model);
  const Dataset data = load_limited(resolve_split(args.data, args.split), args.limit);
  progress("attack: PGD eps=" + format_double(args.epsilon) + " on " + std::to_string(data.size()) + " images");
  const AttackResult<float> result = pgd_linf(model, data.images, data.labels, config);

  const std::size_t n = result.size();
  std::vector<std::uint8_t> success(result.success.begin(), result.success.end());
  const std::vector<ContainerEntry> entries{
      {"adversarial", result.adversarial},
      {"success", Tensor<std::uint8_t>({n}, success)},
      {"loss", Tensor<double>({n}, result.loss)},
      {"linf", Tensor<double>({n}, result.linf)}};
  std::error_code ec;
  fs::create_directories(args.out, ec);
  if (ec) throw IoError("cannot create directory '" + args.out.string() + "': " + ec.message());
  save_container(entries, args.out / "adversarial.atwb");

  std::string csv = "index,label,success,loss,linf\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv += std::to_string(i) + ',' + std::to_string(data.labels[i]) + ',' + std::to_string(result.success[i]) +
           ',' + format_double(result.loss[i]) + ',' + format_double(result.linf[i]) + '\n';
  }
  write_text(args.out / "attack.csv", csv);
  nlohmann::json meta{{"model_file", args.model.string()},
                      {"model_hash", git_blob_hash_file(args.model)},
                      {"attack_config", config.to_json()},
                      {"dataset", data.provenance},
                      {"provenance", command_provenance(command)}};
  write_text(args.out / "attack.json", meta.dump(2) + "\n");
  write_resolved_config(command, args.out / "attack.ini");
  progress("attack: " + std::to_string(result.success_count()) + " of " + std::to_string(n) +
           " images misclassified; wrote " + args.out.string());
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
  fs::path model;
  fs::path data;
  std::string split = "test";
  fs::path out;
  std::string schedule = "default";
  std::size_t limit = 0;
  bool macro = false;
  AttackFlags attack;
};

void cmd_evaluate(const CLI::App& command, EvaluateArgs& args) {
  if (args.out.empty()) args.out = output_root() / (args.model.stem().string() + ".curve.csv");
  const EpsilonSchedule schedule = EpsilonSchedule::parse(args.schedule);
  AttackConfig config = args.attack.config();
  config.validate();
  const ModelGraph<float> model = load_model<float>(args.model);
  const Dataset data = load_limited(resolve_split(args.data, args.split), args.limit);
  progress("evaluate: " + std::to_string(schedule.radii.size()) + " radii on " + std::to_string(data.size()) +
           " images");
  RobustnessCurve curve = robustness_curve(model, data, schedule, config,
                                           args.macro ? AccuracyKind::macro : AccuracyKind::micro);
  curve.model_id = args.model.stem().string();
  write_curve_csv(curve, args.out);

  nlohmann::json meta{{"model_id", curve.model_id},
                      {"label", curve.label},
                      {"model_file", args.model.string()},
                      {"model_hash", git_blob_hash_file(args.model)},
                      {"model_metadata", model.metadata},
                      {"attack_config", curve.attack_config},
                      {"dataset", data.provenance},
                      {"provenance", command_provenance(command)}};
  fs::path meta_path = args.out;
  write_text(meta_path.replace_extension(".json"), meta.dump(2) + "\n");
  fs::path config_path = args.out;
  write_resolved_config(command, config_path.replace_extension(".evaluate.ini"));
  for (const auto& p : curve.points) {
    progress("  eps " + format_double(p.epsilon) + "  accuracy " + format_double(p.accuracy));
  }
  progress("evaluate: wrote " + args.out.string());
}

// ---- explain --------------------------------------------------------------

struct ExplainArgs {
  fs::path model;
  fs::path data;
  std::string split = "test";
  fs::path out;
  std::vector<std::size_t> indices;
  std::size_t count = 8;
  std::vector<double> epsilons{0.02, 0.08};
  std::string layer;
  AttackFlags attack;
};

void cmd_explain(const CLI::App& command, ExplainArgs& args) {
  if (args.out.empty()) args.out = output_root() / "explain";
  AttackConfig config = args.attack.config();
  const ModelGraph<float> model = load_model<float>(args.model);
  const Dataset data = load_dataset(resolve_split(args.data, args.split));
  const std::vector<std::size_t> indices =
      args.indices.empty() ? spread_indices(data.size(), args.count) : args.indices;
  const std::string layer = args.layer.empty() ? model.default_cam_layer() : args.layer;
  progress("explain: " + std::to_string(indices.size()) + " images at layer " + layer);
  const auto explanations = explain_samples(model, data, indices, args.epsilons, config, layer);
  write_explanations(explanations, to_string(model.config().head), args.out);
  nlohmann::json meta{{"model_file", args.model.string()},
                      {"model_hash", git_blob_hash_file(args.model)},
                      {"layer", layer},
                      {"attack_config", config.to_json()},
                      {"dataset", data.provenance},
                      {"provenance", command_provenance(command)}};
  write_text(args.out / "explain.json", meta.dump(2) + "\n");
  write_resolved_config(command, args.out / "explain.ini");
  progress("explain: wrote " + args.out.string());
}

// ---- report ---------------------------------------------------------------

struct ReportArgs {
  std::vector<fs::path> curves;
  std::vector<std::string> labels;
  fs::path out;
  bool log_x = false;
  std::string title = RenderOptions{}.title;
};

void cmd_report(const CLI::App& command, ReportArgs& args) {
  if (args.out.empty()) args.out = output_root() / "report.svg";
  if (!args.labels.empty() && args.labels.size() != args.curves.size()) {
    throw ValueError("--labels needs one label per curve (" + std::to_string(args.curves.size()) + ")");
  }
  Report report;
  report.render.log_epsilon = args.log_x;
  report.render.title = args.title;
  nlohmann::json curves_meta = nlohmann::json::array();
  for (std::size_t i = 0; i < args.curves.size(); ++i) {
    RobustnessCurve curve = read_curve_csv(args.curves[i]);
    curve.model_id = args.curves[i].stem().string();
    nlohmann::json entry{{"csv", args.curves[i].string()}, {"csv_hash", git_blob_hash_file(args.curves[i])}};
    fs::path sidecar = args.curves[i];
    sidecar.replace_extension(".json");
    if (fs::exists(sidecar)) {
      const auto bytes = read_file_bytes(sidecar);
      try {
        entry["evaluation"] = nlohmann::json::parse(bytes.begin(), bytes.end());
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + sidecar.string() + "': " + e.what());
      }
      curve.label = entry["evaluation"].value("label", curve.model_id);
      curve.model_id = entry["evaluation"].value("model_id", curve.model_id);
    }
    if (!args.labels.empty()) curve.label = args.labels[i];
    if (curve.label.empty()) curve.label = curve.model_id;
    report.curves.push_back(std::move(curve));
    curves_meta.push_back(std::move(entry));
  }
  report.metadata = {{"curves", curves_meta},
                     {"render", {{"log_epsilon", args.log_x}, {"title", args.title}}},
                     {"provenance", command_provenance(command)}};
  write_svg(report, args.out);
  fs::path meta_path = args.out;
  write_text(meta_path.replace_extension(".json"), report.metadata.dump(2) + "\n");
  fs::path config_path = args.out;
  write_resolved_config(command, config_path.replace_extension(".report.ini"));
  progress("report: wrote " + args.out.string());
}

int fail(int code, const std::string& message, const std::string& hint) {
  std::cerr << "error: " << message << '\n' << "hint: " << hint << '\n';
  return code;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Adversarial robustness workbench: synthetic data, CNN training with an optional "
               "soft-attention head, PGD robustness curves and Grad-CAM explanations."};
  app.name("atwb");
  app.option_defaults()->always_capture_default();
  app.fallthrough();
  app.require_subcommand(1);
  app.allow_config_extras(false);
  app.set_config("--config", "", "INI file with [command] sections of flag=value lines; flags win");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic blob/ring dataset");
  synth_cmd->add_option("--out", synth.out, "Dataset directory (train/ and test/ are created inside)");
  synth_cmd->add_option("--n", synth.config.n_train, "Training images");
  synth_cmd->add_option("--n-test", synth.config.n_test, "Test images");
  synth_cmd->add_option("--size", synth.config.image_size, "Image height and width");
  synth_cmd->add_option("--channels", synth.config.channels, "1 (grayscale) or 3 (RGB)");
  synth_cmd->add_option("--ratio", synth.config.imbalance_ratio, "Class imbalance blob:ring");
  synth_cmd->add_option("--noise", synth.config.noise_amplitude, "Additive noise amplitude");
  synth_cmd->add_option("--ring-radius-min", synth.config.ring_radius_min);
  synth_cmd->add_option("--ring-radius-max", synth.config.ring_radius_max);
  synth_cmd->add_option("--ring-thickness-min", synth.config.ring_thickness_min);
  synth_cmd->add_option("--ring-thickness-max", synth.config.ring_thickness_max);
  synth_cmd->add_option("--blob-sigma-min", synth.config.blob_sigma_min);
  synth_cmd->add_option("--blob-sigma-max", synth.config.blob_sigma_max);
  synth_cmd->add_option("--seed", synth.config.seed, "Generator seed");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier and write a checkpoint");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--split", tr.split, "Subdirectory used when --data holds several splits");
  train_cmd->add_option("--out", tr.out, "Checkpoint path (.atwb); a .json sidecar is written beside it");
  train_cmd->add_option("--head", tr.head, "baseline or attention")
      ->check(CLI::IsMember({"baseline", "attention"}));
  train_cmd->add_option("--seed", tr.config.seed, "Training seed (shuffling, dropout, validation split)");
  train_cmd->add_option("--init-seed", tr.init_seed, "Weight initialization seed (default: --seed)");
  train_cmd->add_option("--stage-channels", tr.stage_channels, "Channels per residual stage")->delimiter(',');
  train_cmd->add_option("--blocks", tr.blocks, "Residual blocks per stage");
  train_cmd->add_option("--attention-heads", tr.attention_heads, "Soft-attention heads");
  train_cmd->add_option("--dropout", tr.dropout, "Dropout probability in the attention head");
  train_cmd->add_option("--lr", tr.config.learning_rate, "Adam learning rate");
  train_cmd->add_option("--adam-epsilon", tr.config.adam_epsilon, "Adam epsilon");
  train_cmd->add_option("--beta1", tr.config.beta1);
  train_cmd->add_option("--beta2", tr.config.beta2);
  train_cmd->add_option("--max-epochs", tr.config.max_epochs);
  train_cmd->add_option("--patience", tr.config.patience, "Early-stopping patience in epochs");
  train_cmd->add_option("--min-delta", tr.config.min_delta, "Minimum validation-accuracy improvement");
  train_cmd->add_option("--batch-size", tr.config.batch_size);
  train_cmd->add_option("--val-fraction", tr.config.validation_fraction, "Share of images held out");
  train_cmd->add_option("--subsample", tr.config.epoch_subsample_fraction, "Share of training images per epoch");
  train_cmd->add_flag("--no-class-weights", tr.no_class_weights, "Disable inverse-frequency loss weights");

  AttackArgs at;
  auto* attack_cmd = app.add_subcommand("attack", "Run PGD at one radius and save adversarial images");
  attack_cmd->add_option("--model", at.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  attack_cmd->add_option("--data", at.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  attack_cmd->add_option("--split", at.split);
  attack_cmd->add_option("--out", at.out, "Output directory");
  attack_cmd->add_option("--epsilon", at.epsilon, "l-infinity radius")->required();
  attack_cmd->add_option("--limit", at.limit, "Attack only the first N images (0 = all)");
  at.attack.add_to(attack_cmd);

  EvaluateArgs ev;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Accuracy under PGD for each radius of a schedule");
  evaluate_cmd->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  evaluate_cmd->add_option("--split", ev.split);
  evaluate_cmd->add_option("--out", ev.out, "Curve CSV path; a .json sidecar is written beside it");
  evaluate_cmd->add_option("--schedule", ev.schedule, "'default' or comma-separated radii starting at 0");
  evaluate_cmd->add_option("--limit", ev.limit, "Evaluate only the first N images (0 = all)");
  evaluate_cmd->add_flag("--macro", ev.macro, "Class-balanced accuracy instead of per-sample accuracy");
  ev.attack.add_to(evaluate_cmd);

  ExplainArgs ex;
  auto* explain_cmd = app.add_subcommand("explain", "Grad-CAM and difference maps before/after PGD");
  explain_cmd->add_option("--model", ex.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--data", ex.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  explain_cmd->add_option("--split", ex.split);
  explain_cmd->add_option("--out", ex.out, "Output directory for PGM maps");
  explain_cmd->add_option("--indices", ex.indices, "Image indices (default: --count spread over the set)")
      ->delimiter(',');
  explain_cmd->add_option("--count", ex.count, "Number of evenly spaced images");
  explain_cmd->add_option("--epsilon", ex.epsilons, "Attack radii")->delimiter(',');
  explain_cmd->add_option("--layer", ex.layer, "Grad-CAM layer (default: last backbone block)");
  ex.attack.add_to(explain_cmd);

  ReportArgs rp;
  auto* report_cmd = app.add_subcommand("report", "Plot robustness curves into one SVG");
  report_cmd->add_option("--curves", rp.curves, "Curve CSVs written by evaluate")
      ->required()
      ->delimiter(',')
      ->check(CLI::ExistingFile);
  report_cmd->add_option("--labels", rp.labels, "Legend labels (default: head kind from the sidecar)")
      ->delimiter(',');
  report_cmd->add_option("--out", rp.out, "SVG path");
  report_cmd->add_flag("--log-x", rp.log_x, "Logarithmic epsilon axis");
  report_cmd->add_option("--title", rp.title);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kValidationError;
  }

  try {
    if (*synth_cmd) cmd_synth(*synth_cmd, synth);
    if (*train_cmd) cmd_train(*train_cmd, tr);
    if (*attack_cmd) cmd_attack(*attack_cmd, at);
    if (*evaluate_cmd) cmd_evaluate(*evaluate_cmd, ev);
    if (*explain_cmd) cmd_explain(*explain_cmd, ex);
    if (*report_cmd) cmd_report(*report_cmd, rp);
  } catch (const ValueError& e) {
    return fail(kValidationError, e.what(), "check the flag values; `atwb <command> --help` lists them");
  } catch (const ShapeError& e) {
    return fail(kValidationError, e.what(), "the model and the dataset disagree on image or label shape");
  } catch (const FormatError& e) {
    return fail(kValidationError, e.what(), "the file is not a valid artifact; regenerate it with atwb");
  } catch (const DivergenceError& e) {
    return fail(kRuntimeError, e.what(), "training diverged; try a smaller --lr");
  } catch (const IoError& e) {
    return fail(kRuntimeError, e.what(), "check that the output location is writable");
  } catch (const std::exception& e) {
    return fail(kRuntimeError, e.what(), "unexpected failure; rerun with the same flags to reproduce");
  }
  return kSuccess;
}

}  // namespace atwb::cli
