// fovealnet: gaze-tracked foveated-rendering co-simulation CLI.
//
// Subcommands: synth, crop, train, eval, fit-profile, select, report.
// Exit codes: 0 success, 1 user error (bad inputs/config/paths), 2 internal
// invariant violation.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fovealnet/cropper.hpp"
#include "fovealnet/experiment.hpp"
#include "fovealnet/geometry.hpp"
#include "fovealnet/image.hpp"
#include "fovealnet/model.hpp"
#include "fovealnet/report.hpp"
#include "fovealnet/selector.hpp"
#include "fovealnet/synth.hpp"
#include "fovealnet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fovealnet;

namespace {

std::string resolve_out_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("FOVEALNET_OUT_DIR")) return env;
  throw UserError("no output directory: pass --out or set FOVEALNET_OUT_DIR");
}

ExperimentSpec load_spec_or_default(const std::string& config_path) {
  if (config_path.empty()) return ExperimentSpec{};
  return load_experiment_spec(config_path);
}

std::optional<LatencyProfile> load_loss_profile(const ExperimentSpec& spec) {
  if (spec.loss.profile_csv.empty()) return std::nullopt;
  return load_profile_csv(spec.loss.profile_csv);
}

json window_json(const CropWindow& w) {
  return json{{"x0", w.x0}, {"y0", w.y0}, {"width", w.width},
              {"height", w.height}};
}

std::vector<std::string> list_images(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string p = entry.path().string();
    if (has_suffix(p, ".pgm") || has_suffix(p, ".png")) files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  return files;
}

// --- synth ------------------------------------------------------------------

int cmd_synth(const std::string& config_path, int count,
              std::optional<std::uint64_t> seed, const std::string& out_flag,
              const std::string& format) {
  ExperimentSpec spec = load_spec_or_default(config_path);
  if (seed) spec.scene.seed = *seed;
  if (format != "pgm" && format != "png")
    throw UserError("--format must be pgm or png");
  const std::string out_dir = resolve_out_dir(out_flag);
  if (count == 0)
    std::cerr << "warning: count is 0, writing an empty corpus\n";

  const auto frames = generate(spec.scene, count);
  fs::create_directories(out_dir);
  save_corpus(out_dir, frames, format);

  json manifest{{"command", "synth"},
                {"count", count},
                {"seed", spec.scene.seed},
                {"format", format},
                {"scene", spec.scene}};
  std::ofstream mf(fs::path(out_dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
  std::cout << "wrote " << frames.size() << " frames to " << out_dir << "\n";
  return 0;
}

// --- crop -------------------------------------------------------------------

int cmd_crop(const std::string& config_path,
             std::vector<std::string> inputs, const std::string& input_dir,
             const std::string& out_path, bool streaming) {
  ExperimentSpec spec = load_spec_or_default(config_path);
  if (!input_dir.empty()) {
    auto listed = list_images(input_dir);
    inputs.insert(inputs.end(), listed.begin(), listed.end());
  }
  if (inputs.empty()) throw UserError("crop: no input images");

  std::ofstream file_out;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    file_out.open(out_path);
    if (!file_out) throw UserError("cannot write " + out_path);
    out = &file_out;
  }

  CropSession session(spec.cropper, spec.event);
  for (const auto& path : inputs) {
    json line{{"file", path}};
    try {
      const GrayFrame frame = load_image(path);
      if (streaming) {
        const auto step = session.step(frame);
        line["decision"] =
            step.decision == EventDecision::Reuse ? "reuse" : "recompute";
        line["window"] = step.window ? window_json(*step.window) : json();
      } else {
        const auto window = locate_and_crop(frame, spec.cropper);
        line["window"] = window ? window_json(*window) : json();
      }
    } catch (const std::exception& e) {
      line["error"] = e.what();
    }
    (*out) << line.dump() << "\n";
  }
  return 0;
}

// --- train ------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& corpus_dir,
              const std::string& out_flag, std::optional<std::uint64_t> seed) {
  ExperimentSpec spec = load_spec_or_default(config_path);
  if (seed) spec.train.seed = *seed;
  const std::string out_dir = resolve_out_dir(out_flag);

  auto loaded = load_corpus(corpus_dir);
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
  if (loaded.skipped > 0)
    std::cerr << "warning: skipped " << loaded.skipped << " corpus rows\n";
  if (loaded.frames.empty()) throw UserError("train: corpus is empty");

  const auto profile = load_loss_profile(spec);
  if ((spec.train.loss == LossKind::PerformanceAware ||
       spec.train.loss == LossKind::Multires) &&
      !profile)
    throw UserError("train: this loss needs loss.profile_csv in the config");

  GazeModel model = GazeModel::init(spec.model, spec.train.seed);
  const TrainResult result =
      train(model, loaded.frames, spec.train,
            spec.loss_config(profile ? &*profile : nullptr), spec.pipeline());

  fs::create_directories(out_dir);
  save_checkpoint(result.model, (fs::path(out_dir) / "checkpoint.bin").string());
  write_epoch_log_csv(result.log,
                      (fs::path(out_dir) / "train_log.csv").string());
  json summary{{"command", "train"},
               {"corpus", corpus_dir},
               {"epochs_run", result.log.size()},
               {"best_epoch", result.best_epoch},
               {"best_metric", result.best_metric},
               {"loss", loss_kind_name(spec.train.loss)},
               {"seed", spec.train.seed}};
  std::ofstream sf(fs::path(out_dir) / "result.json");
  sf << summary.dump(2) << "\n";
  std::cout << "best epoch " << result.best_epoch << ", metric "
            << result.best_metric << "\n";
  return 0;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& corpus_dir, const std::string& out_path,
             int depth, const std::string& label) {
  ExperimentSpec spec = load_spec_or_default(config_path);
  const GazeModel model = load_checkpoint(checkpoint);

  auto loaded = load_corpus(corpus_dir);
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
  if (loaded.frames.empty()) throw UserError("eval: corpus is empty");

  const PreparedDataset ds =
      prepare_dataset(loaded.frames, model.config, spec.pipeline());
  std::vector<FloatImage> inputs;
  std::vector<GazeVector> labels;
  for (const auto& s : ds.samples) {
    inputs.push_back(s.input);
    labels.push_back(s.label);
  }

  ErrorDistribution dist;
  if (depth > 0)
    dist = evaluate(truncate(model, depth), inputs, labels);
  else
    dist = evaluate(model, inputs, labels);

  json out{{"label", label.empty() ? fs::path(checkpoint).stem().string()
                                   : label},
           {"checkpoint", checkpoint},
           {"corpus", corpus_dir},
           {"depth", depth > 0 ? depth : model.config.depth},
           {"distribution", dist}};
  if (out_path.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::ofstream f(out_path);
    if (!f) throw UserError("cannot write " + out_path);
    f << out.dump(2) << "\n";
  }
  return 0;
}

// --- fit-profile ------------------------------------------------------------

int cmd_fit_profile(const std::string& samples_csv, const std::string& out_csv,
                    const std::string& device, const std::string& resolution) {
  const LatencyProfile profile =
      load_profile_csv(samples_csv, device, resolution);
  save_profile_csv(profile, out_csv);
  std::cout << "fitted " << profile.knots.size() << " knots\n";
  return 0;
}

// --- select -----------------------------------------------------------------

int cmd_select(const std::string& depths_csv, const std::string& profile_csv,
               const std::string& resolution, const std::string& percentile,
               double theta_i, double t_sensing, double t_comm,
               const std::string& out_path, bool with_table) {
  const auto depths = load_depth_profile_csv(depths_csv);
  const LatencyProfile profile =
      load_profile_csv(profile_csv, "", resolution.empty() ? "custom"
                                                           : resolution);
  SelectionQuery query;
  query.profile = &profile;
  query.percentile = percentile_from_name(percentile);
  query.theta_i_deg = theta_i;
  query.t_sensing_ms = t_sensing;
  query.t_comm_ms = t_comm;

  const Selection sel = select(depths, query);
  json out{{"condition", resolution.empty() ? "custom" : resolution},
           {"percentile", percentile},
           {"theta_i_deg", theta_i},
           {"depth", sel.depth},
           {"t_tracking_ms", sel.budget.t_tracking_ms},
           {"t_fr_ms", sel.budget.t_fr_ms},
           {"t_total_ms", total_latency(sel.budget)}};
  if (with_table) {
    json rows = json::array();
    for (const auto& row : depth_table_rows(depths, query))
      rows.push_back(json{{"depth", row.depth},
                          {"t_tracking_ms", row.t_tracking_ms},
                          {"t_fr_ms", row.t_fr_ms},
                          {"t_total_ms", row.t_total_ms},
                          {"chosen", row.chosen}});
    out["table"] = rows;
  }
  if (out_path.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::ofstream f(out_path);
    if (!f) throw UserError("cannot write " + out_path);
    f << out.dump(2) << "\n";
  }
  return 0;
}

// --- report -----------------------------------------------------------------

int cmd_report(const std::string& results_dir, const std::string& out_path) {
  if (!fs::is_directory(results_dir))
    throw UserError("report: not a directory: " + results_dir);

  std::vector<ErrorTableRow> error_rows;
  struct DepthTable {
    std::string condition;
    std::vector<DepthTableRow> rows;
  };
  std::vector<DepthTable> depth_tables;

  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(results_dir))
    files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());

  for (const auto& path : files) {
    if (!has_suffix(path, ".json")) continue;
    std::ifstream in(path);
    json j;
    try {
      in >> j;
    } catch (const json::exception&) {
      std::cerr << "warning: skipping unparseable " << path << "\n";
      continue;
    }
    if (j.contains("distribution")) {
      ErrorTableRow row;
      row.label = j.value("label", fs::path(path).stem().string());
      j.at("distribution").get_to(row.dist);
      error_rows.push_back(std::move(row));
    } else if (j.contains("table")) {
      DepthTable table;
      table.condition = j.value("condition", fs::path(path).stem().string());
      for (const auto& r : j.at("table")) {
        DepthTableRow row;
        row.depth = r.at("depth").get<int>();
        row.t_tracking_ms = r.at("t_tracking_ms").get<double>();
        row.t_fr_ms = r.at("t_fr_ms").get<double>();
        row.t_total_ms = r.at("t_total_ms").get<double>();
        row.chosen = r.value("chosen", false);
        table.rows.push_back(row);
      }
      depth_tables.push_back(std::move(table));
    }
  }

  if (error_rows.empty() && depth_tables.empty())
    throw UserError("report: no eval or selection results in " + results_dir);

  std::string md = "# FovealNet evaluation report\n\n";
  if (!error_rows.empty()) {
    md += "## Gaze error distributions (degrees)\n\n";
    md += render_error_table(error_rows);
    md += "\n";
  }
  if (!depth_tables.empty()) {
    md += "## Latency vs. depth\n\n";
    for (const auto& table : depth_tables) {
      md += render_depth_table(table.condition, table.rows);
      md += "\n";
    }
  }

  const std::string out_file =
      out_path.empty() ? (fs::path(results_dir) / "report.md").string()
                       : out_path;
  std::ofstream f(out_file);
  if (!f) throw UserError("cannot write " + out_file);
  f << md;
  std::cout << "wrote " << out_file << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaze-tracked foveated rendering co-simulation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic eye corpus");
  std::string synth_config, synth_out, synth_format = "pgm";
  int synth_count = 100;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--config", synth_config, "experiment config JSON");
  synth->add_option("--count", synth_count, "number of frames");
  synth->add_option("--seed", synth_seed, "override scene seed");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--format", synth_format, "image format: pgm|png");

  // crop
  auto* crop = app.add_subcommand("crop", "locate pupils and emit crop windows");
  std::string crop_config, crop_dir, crop_out;
  std::vector<std::string> crop_inputs;
  bool crop_prev = false;
  crop->add_option("--config", crop_config, "experiment config JSON");
  crop->add_option("inputs", crop_inputs, "input images");
  crop->add_option("--dir", crop_dir, "directory of input images");
  crop->add_option("--out", crop_out, "output JSONL path (default stdout)");
  crop->add_flag("--prev", crop_prev,
                 "streaming mode: reuse/recompute against the previous frame");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a gaze model");
  std::string train_config, train_corpus, train_out;
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("--config", train_config, "experiment config JSON");
  train_cmd->add_option("--corpus", train_corpus, "corpus directory")
      ->required();
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--seed", train_seed, "override training seed");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_config, eval_checkpoint, eval_corpus, eval_out, eval_label;
  int eval_depth = 0;
  eval_cmd->add_option("--config", eval_config, "experiment config JSON");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")
      ->required();
  eval_cmd->add_option("--corpus", eval_corpus, "corpus directory")->required();
  eval_cmd->add_option("--out", eval_out, "output JSON path (default stdout)");
  eval_cmd->add_option("--depth", eval_depth,
                       "evaluate the early exit at this depth");
  eval_cmd->add_option("--label", eval_label, "row label for reports");

  // fit-profile
  auto* fit = app.add_subcommand("fit-profile",
                                 "validate and normalize a latency profile");
  std::string fit_samples, fit_out, fit_device, fit_resolution = "custom";
  fit->add_option("--samples", fit_samples, "input CSV of (ecc, ms) samples")
      ->required();
  fit->add_option("--out", fit_out, "output CSV path")->required();
  fit->add_option("--device", fit_device, "device label");
  fit->add_option("--resolution", fit_resolution,
                  "resolution label: 720P|1080P|1440P|custom");

  // select
  auto* select_cmd =
      app.add_subcommand("select", "pick the depth minimizing total latency");
  std::string sel_depths, sel_profile, sel_resolution, sel_percentile = "P95";
  std::string sel_out;
  double sel_theta_i = 5.0, sel_sensing = 0.0, sel_comm = 0.0;
  bool sel_table = false;
  select_cmd->add_option("--depths", sel_depths, "depth profile CSV")
      ->required();
  select_cmd->add_option("--profile", sel_profile, "latency profile CSV")
      ->required();
  select_cmd->add_option("--resolution", sel_resolution, "condition label");
  select_cmd->add_option("--percentile", sel_percentile, "P90 or P95");
  select_cmd->add_option("--theta-i", sel_theta_i, "foveal eccentricity, deg");
  select_cmd->add_option("--t-sensing", sel_sensing, "sensing latency, ms");
  select_cmd->add_option("--t-comm", sel_comm, "link latency, ms");
  select_cmd->add_option("--out", sel_out, "output JSON path (default stdout)");
  select_cmd->add_flag("--table", sel_table, "include the full per-depth table");

  // report
  auto* report = app.add_subcommand("report", "render a Markdown report");
  std::string report_dir, report_out;
  report->add_option("--results", report_dir, "results directory")->required();
  report->add_option("--out", report_out, "output Markdown path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_config, synth_count, synth_seed, synth_out,
                       synth_format);
    if (crop->parsed())
      return cmd_crop(crop_config, crop_inputs, crop_dir, crop_out, crop_prev);
    if (train_cmd->parsed())
      return cmd_train(train_config, train_corpus, train_out, train_seed);
    if (eval_cmd->parsed())
      return cmd_eval(eval_config, eval_checkpoint, eval_corpus, eval_out,
                      eval_depth, eval_label);
    if (fit->parsed())
      return cmd_fit_profile(fit_samples, fit_out, fit_device, fit_resolution);
    if (select_cmd->parsed())
      return cmd_select(sel_depths, sel_profile, sel_resolution, sel_percentile,
                        sel_theta_i, sel_sensing, sel_comm, sel_out, sel_table);
    if (report->parsed()) return cmd_report(report_dir, report_out);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
