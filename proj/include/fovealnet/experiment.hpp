#pragma once

// One experiment config file drives every CLI subcommand; flags override
// individual fields. Sections mirror the module configs.

#include <fstream>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"

#include "fovealnet/cropper.hpp"
#include "fovealnet/errors.hpp"
#include "fovealnet/loss.hpp"
#include "fovealnet/model.hpp"
#include "fovealnet/synth.hpp"
#include "fovealnet/trainer.hpp"

namespace fovealnet {

inline void to_json(nlohmann::json& j, const SceneParams& p) {
  j = nlohmann::json{{"width", p.width},
                     {"height", p.height},
                     {"eye_cx", p.eye_cx},
                     {"eye_cy", p.eye_cy},
                     {"eye_radius", p.eye_radius},
                     {"eye_jitter_x", p.eye_jitter_x},
                     {"eye_jitter_y", p.eye_jitter_y},
                     {"iris_radius_min", p.iris_radius_min},
                     {"iris_radius_max", p.iris_radius_max},
                     {"pupil_radius_min", p.pupil_radius_min},
                     {"pupil_radius_max", p.pupil_radius_max},
                     {"pitch_limit_deg", p.pitch_limit_deg},
                     {"yaw_limit_deg", p.yaw_limit_deg},
                     {"px_per_rad_x", p.px_per_rad_x},
                     {"px_per_rad_y", p.px_per_rad_y},
                     {"center_jitter_px", p.center_jitter_px},
                     {"eyelash_count", p.eyelash_count},
                     {"noise_sigma", p.noise_sigma},
                     {"sclera_level", p.sclera_level},
                     {"iris_level", p.iris_level},
                     {"pupil_level", p.pupil_level},
                     {"lash_level", p.lash_level},
                     {"skin_level", p.skin_level},
                     {"border_level", p.border_level},
                     {"border_band_px", p.border_band_px},
                     {"outlier_fraction", p.outlier_fraction},
                     {"outlier_pitch_bias_rad", p.outlier_pitch_bias_rad},
                     {"outlier_yaw_bias_rad", p.outlier_yaw_bias_rad},
                     {"outlier_sclera_level", p.outlier_sclera_level},
                     {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, SceneParams& p) {
  p.width = j.value("width", p.width);
  p.height = j.value("height", p.height);
  p.eye_cx = j.value("eye_cx", p.eye_cx);
  p.eye_cy = j.value("eye_cy", p.eye_cy);
  p.eye_radius = j.value("eye_radius", p.eye_radius);
  p.eye_jitter_x = j.value("eye_jitter_x", p.eye_jitter_x);
  p.eye_jitter_y = j.value("eye_jitter_y", p.eye_jitter_y);
  p.iris_radius_min = j.value("iris_radius_min", p.iris_radius_min);
  p.iris_radius_max = j.value("iris_radius_max", p.iris_radius_max);
  p.pupil_radius_min = j.value("pupil_radius_min", p.pupil_radius_min);
  p.pupil_radius_max = j.value("pupil_radius_max", p.pupil_radius_max);
  p.pitch_limit_deg = j.value("pitch_limit_deg", p.pitch_limit_deg);
  p.yaw_limit_deg = j.value("yaw_limit_deg", p.yaw_limit_deg);
  p.px_per_rad_x = j.value("px_per_rad_x", p.px_per_rad_x);
  p.px_per_rad_y = j.value("px_per_rad_y", p.px_per_rad_y);
  p.center_jitter_px = j.value("center_jitter_px", p.center_jitter_px);
  p.eyelash_count = j.value("eyelash_count", p.eyelash_count);
  p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
  p.sclera_level = j.value("sclera_level", p.sclera_level);
  p.iris_level = j.value("iris_level", p.iris_level);
  p.pupil_level = j.value("pupil_level", p.pupil_level);
  p.lash_level = j.value("lash_level", p.lash_level);
  p.skin_level = j.value("skin_level", p.skin_level);
  p.border_level = j.value("border_level", p.border_level);
  p.border_band_px = j.value("border_band_px", p.border_band_px);
  p.outlier_fraction = j.value("outlier_fraction", p.outlier_fraction);
  p.outlier_pitch_bias_rad =
      j.value("outlier_pitch_bias_rad", p.outlier_pitch_bias_rad);
  p.outlier_yaw_bias_rad =
      j.value("outlier_yaw_bias_rad", p.outlier_yaw_bias_rad);
  p.outlier_sclera_level =
      j.value("outlier_sclera_level", p.outlier_sclera_level);
  p.seed = j.value("seed", p.seed);
}

inline void to_json(nlohmann::json& j, const CropperConfig& c) {
  j = nlohmann::json{{"border_margin", c.border_margin},
                     {"kernel_radius", c.kernel_radius},
                     {"min_roundness", c.min_roundness},
                     {"min_area", c.min_area},
                     {"window_width", c.window_width},
                     {"window_height", c.window_height}};
  if (c.fixed_threshold)
    j["fixed_threshold"] = *c.fixed_threshold;
  else
    j["fixed_threshold"] = nullptr;
}

inline void from_json(const nlohmann::json& j, CropperConfig& c) {
  c.border_margin = j.value("border_margin", c.border_margin);
  c.kernel_radius = j.value("kernel_radius", c.kernel_radius);
  c.min_roundness = j.value("min_roundness", c.min_roundness);
  c.min_area = j.value("min_area", c.min_area);
  c.window_width = j.value("window_width", c.window_width);
  c.window_height = j.value("window_height", c.window_height);
  if (j.contains("fixed_threshold") && !j.at("fixed_threshold").is_null())
    c.fixed_threshold = j.at("fixed_threshold").get<int>();
}

inline void to_json(nlohmann::json& j, const EventParams& p) {
  j = nlohmann::json{{"beta1", p.beta1}, {"beta2", p.beta2}};
}

inline void from_json(const nlohmann::json& j, EventParams& p) {
  p.beta1 = j.value("beta1", p.beta1);
  p.beta2 = j.value("beta2", p.beta2);
}

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"scale_min", c.scale_min},
                     {"scale_max", c.scale_max},
                     {"max_shift_frac", c.max_shift_frac},
                     {"norm_mean", c.norm_mean},
                     {"norm_std", c.norm_std}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c.scale_min = j.value("scale_min", c.scale_min);
  c.scale_max = j.value("scale_max", c.scale_max);
  c.max_shift_frac = j.value("max_shift_frac", c.max_shift_frac);
  c.norm_mean = j.value("norm_mean", c.norm_mean);
  c.norm_std = j.value("norm_std", c.norm_std);
}

// Loss section: everything but the profile pointer, which is wired at run
// time from profile_csv.
struct LossSpec {
  double n_scale = 100.0;
  double theta_i_deg = 5.0;
  std::string profile_csv;
  std::map<int, double> exit_weights;
};

inline void to_json(nlohmann::json& j, const LossSpec& s) {
  j = nlohmann::json{{"n_scale", s.n_scale},
                     {"theta_i_deg", s.theta_i_deg},
                     {"profile_csv", s.profile_csv}};
  nlohmann::json w = nlohmann::json::object();
  for (const auto& [k, v] : s.exit_weights) w[std::to_string(k)] = v;
  j["exit_weights"] = w;
}

inline void from_json(const nlohmann::json& j, LossSpec& s) {
  s.n_scale = j.value("n_scale", s.n_scale);
  s.theta_i_deg = j.value("theta_i_deg", s.theta_i_deg);
  s.profile_csv = j.value("profile_csv", s.profile_csv);
  if (j.contains("exit_weights"))
    for (const auto& [k, v] : j.at("exit_weights").items())
      s.exit_weights[std::stoi(k)] = v.get<double>();
}

struct ExperimentSpec {
  SceneParams scene;
  ModelConfig model;
  TrainConfig train;
  LossSpec loss;
  EventParams event;
  CropperConfig cropper;
  AugmentConfig augment;
  bool use_crop = true;
  bool use_augment = false;
  bool flip_right = true;

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.use_crop = use_crop;
    p.use_augment = use_augment;
    p.flip_right = flip_right;
    p.cropper = cropper;
    p.augment = augment;
    return p;
  }

  LossConfig loss_config(const LatencyProfile* profile) const {
    LossConfig c;
    c.n_scale = loss.n_scale;
    c.theta_i_deg = loss.theta_i_deg;
    c.profile = profile;
    c.exit_weights = loss.exit_weights;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = nlohmann::json{{"scene", s.scene},
                     {"model", s.model},
                     {"train", s.train},
                     {"loss", s.loss},
                     {"event", s.event},
                     {"cropper", s.cropper},
                     {"augment", s.augment},
                     {"use_crop", s.use_crop},
                     {"use_augment", s.use_augment},
                     {"flip_right", s.flip_right}};
}

inline void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  if (j.contains("scene")) j.at("scene").get_to(s.scene);
  if (j.contains("model")) j.at("model").get_to(s.model);
  if (j.contains("train")) j.at("train").get_to(s.train);
  if (j.contains("loss")) j.at("loss").get_to(s.loss);
  if (j.contains("event")) j.at("event").get_to(s.event);
  if (j.contains("cropper")) j.at("cropper").get_to(s.cropper);
  if (j.contains("augment")) j.at("augment").get_to(s.augment);
  s.use_crop = j.value("use_crop", s.use_crop);
  s.use_augment = j.value("use_augment", s.use_augment);
  s.flip_right = j.value("flip_right", s.flip_right);
}

inline ExperimentSpec load_experiment_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open config: " + path);
  ExperimentSpec spec;
  try {
    nlohmann::json::parse(in).get_to(spec);
  } catch (const nlohmann::json::exception& e) {
    throw UserError(path + ": bad config: " + e.what());
  }
  return spec;
}

}  // namespace fovealnet
