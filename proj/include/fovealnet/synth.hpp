#pragma once

// Deterministic synthetic near-eye frames with exact gaze and pupil-center
// ground truth, the right-eye mirroring rule, training augmentations and
// generic image+CSV corpus ingestion.
//
// The scene is deliberately simple: a bright sclera disc on skin, a darker
// iris disc with a concentric pupil whose position is an affine function of
// (pitch, yaw), thin eyelash strokes, a dark border band and optional
// Gaussian noise. The point is a solvable regression task that exercises the
// losses and the cropper, not photorealism.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fovealnet/errors.hpp"
#include "fovealnet/geometry.hpp"
#include "fovealnet/image.hpp"
#include "fovealnet/rng.hpp"

namespace fovealnet {

enum class Eye { Left, Right };

struct GazeVector {
  double pitch_rad = 0.0;
  double yaw_rad = 0.0;
};

struct LabeledFrame {
  GrayFrame frame;
  GazeVector gaze;
  std::optional<std::pair<double, double>> pupil_center;  // known for synth
  Eye eye = Eye::Left;
};

struct SceneParams {
  int width = 640;
  int height = 400;
  double eye_cx = 320.0;
  double eye_cy = 200.0;
  double eye_radius = 150.0;
  // Per-frame eyeball placement jitter (camera misalignment analog).
  double eye_jitter_x = 0.0;
  double eye_jitter_y = 0.0;
  double iris_radius_min = 70.0;
  double iris_radius_max = 85.0;
  double pupil_radius_min = 24.0;
  double pupil_radius_max = 32.0;
  double pitch_limit_deg = 14.0;
  double yaw_limit_deg = 18.0;
  // Affine gaze -> pupil-offset coefficients, pixels per radian.
  double px_per_rad_x = 170.0;
  double px_per_rad_y = 170.0;
  double center_jitter_px = 1.5;
  int eyelash_count = 7;
  double noise_sigma = 2.0;
  // Skin sits close to the sclera, as in IR near-eye frames; a wide gap
  // between the two bright modes would dominate a bimodal threshold split.
  int sclera_level = 196;
  int iris_level = 118;
  int pupil_level = 22;
  int lash_level = 45;
  int skin_level = 172;
  int border_level = 52;
  int border_band_px = 14;
  // Optional hard subpopulation: every round(1/fraction)-th frame renders its
  // pupil as if the gaze were (label - bias) and marks itself with a darker
  // sclera, so the shift is recoverable from the image.
  double outlier_fraction = 0.0;
  double outlier_pitch_bias_rad = 0.0;
  double outlier_yaw_bias_rad = 0.0;
  int outlier_sclera_level = 158;
  std::uint64_t seed = 1;

  void validate() const {
    if (width < 64 || height < 64)
      throw UserError("SceneParams: frame too small");
    if (!(pupil_radius_max < iris_radius_min))
      throw UserError("SceneParams: pupil radius must stay below iris radius");
    if (!(pupil_level < iris_level && iris_level < sclera_level))
      throw UserError("SceneParams: need pupil < iris < sclera intensity");
    if (!(pupil_radius_min > 0 && pupil_radius_min <= pupil_radius_max &&
          iris_radius_min <= iris_radius_max))
      throw UserError("SceneParams: bad radius ranges");
    if (outlier_fraction < 0.0 || outlier_fraction > 0.5)
      throw UserError("SceneParams: outlier_fraction must be in [0, 0.5]");
    const double max_dx = deg2rad(yaw_limit_deg) * px_per_rad_x +
                          center_jitter_px + eye_jitter_x +
                          std::abs(outlier_yaw_bias_rad) * px_per_rad_x;
    const double max_dy = deg2rad(pitch_limit_deg) * px_per_rad_y +
                          center_jitter_px + eye_jitter_y +
                          std::abs(outlier_pitch_bias_rad) * px_per_rad_y;
    if (eye_cx - max_dx - pupil_radius_max < border_band_px ||
        eye_cx + max_dx + pupil_radius_max >= width - border_band_px ||
        eye_cy - max_dy - pupil_radius_max < border_band_px ||
        eye_cy + max_dy + pupil_radius_max >= height - border_band_px)
      throw UserError(
          "SceneParams: gaze limits allow the pupil to leave the frame");
  }
};

namespace detail {

inline void fill_disc(GrayFrame& f, double cx, double cy, double r,
                      std::uint8_t level) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  const int x1 = std::min(f.width - 1, static_cast<int>(std::ceil(cx + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  const int y1 = std::min(f.height - 1, static_cast<int>(std::ceil(cy + r)));
  const double r2 = r * r;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= r2) f.at(x, y) = level;
    }
}

inline void draw_line(GrayFrame& f, int x0, int y0, int x1, int y1,
                      std::uint8_t level) {
  int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (x0 >= 0 && x0 < f.width && y0 >= 0 && y0 < f.height)
      f.at(x0, y0) = level;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

inline LabeledFrame generate_frame(const SceneParams& params,
                                   std::uint64_t index) {
  Rng rng = Rng::stream(params.seed, index);
  LabeledFrame out;
  out.eye = Eye::Left;
  out.gaze.pitch_rad = rng.uniform(-deg2rad(params.pitch_limit_deg),
                                   deg2rad(params.pitch_limit_deg));
  out.gaze.yaw_rad = rng.uniform(-deg2rad(params.yaw_limit_deg),
                                 deg2rad(params.yaw_limit_deg));

  bool outlier = false;
  if (params.outlier_fraction > 0.0) {
    const auto every =
        static_cast<std::uint64_t>(std::llround(1.0 / params.outlier_fraction));
    outlier = (index % every) == 0;
  }
  // Outliers render the eye as if it were looking at (label - bias).
  double render_pitch = out.gaze.pitch_rad;
  double render_yaw = out.gaze.yaw_rad;
  if (outlier) {
    render_pitch -= params.outlier_pitch_bias_rad;
    render_yaw -= params.outlier_yaw_bias_rad;
  }

  const double iris_r =
      rng.uniform(params.iris_radius_min, params.iris_radius_max);
  const double pupil_r =
      rng.uniform(params.pupil_radius_min, params.pupil_radius_max);
  const double jx = rng.uniform(-params.center_jitter_px, params.center_jitter_px);
  const double jy = rng.uniform(-params.center_jitter_px, params.center_jitter_px);
  const double ejx = rng.uniform(-params.eye_jitter_x, params.eye_jitter_x);
  const double ejy = rng.uniform(-params.eye_jitter_y, params.eye_jitter_y);

  const double eye_cx = params.eye_cx + ejx;
  const double eye_cy = params.eye_cy + ejy;
  const double cx = eye_cx + render_yaw * params.px_per_rad_x + jx;
  const double cy = eye_cy - render_pitch * params.px_per_rad_y + jy;
  out.pupil_center = {{cx, cy}};

  GrayFrame& f = out.frame;
  f = GrayFrame(params.width, params.height,
                static_cast<std::uint8_t>(params.skin_level));
  const std::uint8_t sclera = static_cast<std::uint8_t>(
      outlier ? params.outlier_sclera_level : params.sclera_level);
  detail::fill_disc(f, eye_cx, eye_cy, params.eye_radius, sclera);
  detail::fill_disc(f, cx, cy, iris_r,
                    static_cast<std::uint8_t>(params.iris_level));
  detail::fill_disc(f, cx, cy, pupil_r,
                    static_cast<std::uint8_t>(params.pupil_level));

  for (int k = 0; k < params.eyelash_count; ++k) {
    // Upper arc of the eyeball; y grows downward, so the arc angles sit in
    // (180, 360) degrees.
    const double phi =
        deg2rad(rng.uniform(205.0, 335.0));
    const double bx = eye_cx + params.eye_radius * std::cos(phi);
    const double by = eye_cy + params.eye_radius * std::sin(phi);
    const double len = rng.uniform(16.0, 26.0);
    const double tilt = deg2rad(rng.uniform(-14.0, 14.0));
    const double ex = bx + len * std::cos(phi + tilt);
    const double ey = by + len * std::sin(phi + tilt);
    detail::draw_line(f, static_cast<int>(std::lround(bx)),
                      static_cast<int>(std::lround(by)),
                      static_cast<int>(std::lround(ex)),
                      static_cast<int>(std::lround(ey)),
                      static_cast<std::uint8_t>(params.lash_level));
  }

  if (params.border_band_px > 0) {
    const int b = params.border_band_px;
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x)
        if (x < b || x >= f.width - b || y < b || y >= f.height - b)
          f.at(x, y) = static_cast<std::uint8_t>(params.border_level);
  }

  if (params.noise_sigma > 0.0) {
    for (auto& px : f.data) {
      const double v = px + rng.normal(0.0, params.noise_sigma);
      px = static_cast<std::uint8_t>(
          std::clamp(static_cast<int>(std::lround(v)), 0, 255));
    }
  }
  return out;
}

inline std::vector<LabeledFrame> generate(const SceneParams& params,
                                          int count) {
  params.validate();
  if (count < 0) throw UserError("generate: count must be >= 0");
  std::vector<LabeledFrame> frames;
  frames.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    frames.push_back(generate_frame(params, static_cast<std::uint64_t>(i)));
  return frames;
}

// Right-eye frames are mirrored to the left-eye convention: the image flips
// horizontally, yaw changes sign, pitch is untouched.
inline LabeledFrame flip_right_eye(const LabeledFrame& in, Eye eye) {
  if (eye == Eye::Left) return in;
  LabeledFrame out = in;
  for (int y = 0; y < in.frame.height; ++y)
    for (int x = 0; x < in.frame.width; ++x)
      out.frame.at(x, y) = in.frame.at(in.frame.width - 1 - x, y);
  out.gaze.yaw_rad = -in.gaze.yaw_rad;
  if (in.pupil_center)
    out.pupil_center = {
        {in.frame.width - 1 - in.pupil_center->first, in.pupil_center->second}};
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double scale_min = 0.8;
  double scale_max = 1.0;
  double max_shift_frac = 0.10;
  double norm_mean = 0.5;  // applied to intensities scaled to [0, 1]
  double norm_std = 0.25;

  void validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
      throw UserError("AugmentConfig: scale range must sit inside (0, 1]");
    if (!(max_shift_frac >= 0.0 && max_shift_frac < 1.0))
      throw UserError("AugmentConfig: shift fraction must be in [0, 1)");
    if (!(norm_std > 0.0)) throw UserError("AugmentConfig: std must be > 0");
  }
};

inline FloatImage normalize_frame(const GrayFrame& frame,
                                  const AugmentConfig& cfg) {
  FloatImage out(frame.width, frame.height);
  for (std::size_t i = 0; i < frame.data.size(); ++i)
    out.data[i] = (frame.data[i] / 255.0 - cfg.norm_mean) / cfg.norm_std;
  return out;
}

// Random crop to scale in [scale_min, scale_max], random shift of up to
// max_shift_frac of each dimension, resized back to the input size.
inline GrayFrame augment_geometric(const GrayFrame& frame,
                                   const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const int cw = std::max(1, static_cast<int>(std::lround(scale * frame.width)));
  const int ch = std::max(1, static_cast<int>(std::lround(scale * frame.height)));
  const int base_x = (frame.width - cw) / 2;
  const int base_y = (frame.height - ch) / 2;
  const int dx = static_cast<int>(std::lround(
      rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * frame.width));
  const int dy = static_cast<int>(std::lround(
      rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * frame.height));
  const int x0 = std::clamp(base_x + dx, 0, frame.width - cw);
  const int y0 = std::clamp(base_y + dy, 0, frame.height - ch);
  GrayFrame cropped = crop_region(frame, x0, y0, cw, ch);
  if (cw == frame.width && ch == frame.height) return cropped;
  return resize_bilinear(cropped, frame.width, frame.height);
}

struct AugmentedFrame {
  FloatImage image;
  GazeVector gaze;  // labels pass through augmentation unchanged
};

inline AugmentedFrame augment(const LabeledFrame& frame,
                              const AugmentConfig& cfg, Rng& rng) {
  AugmentedFrame out;
  out.image = normalize_frame(augment_geometric(frame.frame, cfg, rng), cfg);
  out.gaze = frame.gaze;
  return out;
}

// ---------------------------------------------------------------------------
// Corpus I/O
//
// labels CSV: "filename,eye,pitch_rad,yaw_rad". Pupil-center ground truth,
// when known, travels in a sibling pupils.csv ("filename,pupil_x,pupil_y").

struct CorpusLoadResult {
  std::vector<LabeledFrame> frames;
  int skipped = 0;
  std::vector<std::string> warnings;
};

inline void save_corpus(const std::string& dir,
                        const std::vector<LabeledFrame>& frames,
                        const std::string& image_ext = "pgm") {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream labels(fs::path(dir) / "labels.csv");
  if (!labels) throw UserError("cannot write labels.csv in " + dir);
  labels << "filename,eye,pitch_rad,yaw_rad\n";
  std::ofstream pupils;
  bool any_pupil = false;
  for (const auto& f : frames)
    if (f.pupil_center) any_pupil = true;
  if (any_pupil) {
    pupils.open(fs::path(dir) / "pupils.csv");
    pupils << "filename,pupil_x,pupil_y\n";
  }
  char buf[160];
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::snprintf(buf, sizeof buf, "frame_%05zu.%s", i, image_ext.c_str());
    const std::string name = buf;
    save_image(frames[i].frame, (fs::path(dir) / name).string());
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g\n", name.c_str(),
                  frames[i].eye == Eye::Left ? "left" : "right",
                  frames[i].gaze.pitch_rad, frames[i].gaze.yaw_rad);
    labels << buf;
    if (any_pupil && frames[i].pupil_center) {
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n", name.c_str(),
                    frames[i].pupil_center->first,
                    frames[i].pupil_center->second);
      pupils << buf;
    }
  }
}

inline CorpusLoadResult load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  CorpusLoadResult result;
  if (!fs::is_directory(dir)) throw UserError("not a directory: " + dir);
  const fs::path labels_path = fs::path(dir) / "labels.csv";
  if (!fs::exists(labels_path)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string p = entry.path().string();
      if (has_suffix(p, ".pgm") || has_suffix(p, ".png"))
        throw UserError(dir + ": images present but labels.csv is missing");
    }
    result.warnings.push_back(dir + ": no labels.csv; empty corpus");
    return result;
  }

  std::map<std::string, std::pair<double, double>> pupil_by_name;
  const fs::path pupils_path = fs::path(dir) / "pupils.csv";
  if (fs::exists(pupils_path)) {
    std::ifstream in(pupils_path);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      std::istringstream row(line);
      std::string name, xs, ys;
      if (std::getline(row, name, ',') && std::getline(row, xs, ',') &&
          std::getline(row, ys))
        try {
          pupil_by_name[name] = {std::stod(xs), std::stod(ys)};
        } catch (...) {
        }
    }
  }

  std::ifstream in(labels_path);
  std::string line;
  if (!std::getline(in, line))
    throw UserError(labels_path.string() + ": empty labels file");
  int lineno = 1;
  int expected_w = -1, expected_h = -1;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string name, eye_s, pitch_s, yaw_s;
    const bool fields_ok =
        static_cast<bool>(std::getline(row, name, ',')) &&
        static_cast<bool>(std::getline(row, eye_s, ',')) &&
        static_cast<bool>(std::getline(row, pitch_s, ',')) &&
        static_cast<bool>(std::getline(row, yaw_s));
    auto skip = [&](const std::string& why) {
      ++result.skipped;
      result.warnings.push_back(labels_path.string() + ":" +
                                std::to_string(lineno) + ": " + why);
    };
    if (!fields_ok) {
      skip("malformed row '" + line + "'");
      continue;
    }
    LabeledFrame frame;
    if (eye_s == "left") {
      frame.eye = Eye::Left;
    } else if (eye_s == "right") {
      frame.eye = Eye::Right;
    } else {
      skip("unknown eye '" + eye_s + "'");
      continue;
    }
    try {
      frame.gaze.pitch_rad = std::stod(pitch_s);
      frame.gaze.yaw_rad = std::stod(yaw_s);
    } catch (...) {
      skip("bad gaze values");
      continue;
    }
    try {
      frame.frame = load_image((fs::path(dir) / name).string());
    } catch (const std::exception& e) {
      skip(e.what());
      continue;
    }
    if (expected_w < 0) {
      expected_w = frame.frame.width;
      expected_h = frame.frame.height;
    } else if (frame.frame.width != expected_w ||
               frame.frame.height != expected_h) {
      skip(name + ": dimension mismatch with rest of corpus");
      continue;
    }
    auto it = pupil_by_name.find(name);
    if (it != pupil_by_name.end()) frame.pupil_center = it->second;
    result.frames.push_back(std::move(frame));
  }
  if (result.frames.empty() && result.skipped == 0)
    result.warnings.push_back(dir + ": labels.csv lists no frames");
  return result;
}

}  // namespace fovealnet
