#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fovealnet/cropper.hpp"
#include "fovealnet/synth.hpp"

using namespace fovealnet;
namespace fs = std::filesystem;

namespace {

// Desk-sized scene so per-test generation stays cheap.
SceneParams small_scene(std::uint64_t seed = 1) {
  SceneParams p;
  p.width = 200;
  p.height = 140;
  p.eye_cx = 100;
  p.eye_cy = 70;
  p.eye_radius = 30;
  p.iris_radius_min = 12;
  p.iris_radius_max = 15;
  p.pupil_radius_min = 5;
  p.pupil_radius_max = 7;
  p.pitch_limit_deg = 12;
  p.yaw_limit_deg = 14;
  p.px_per_rad_x = 30;
  p.px_per_rad_y = 30;
  p.center_jitter_px = 1.0;
  p.eyelash_count = 3;
  p.noise_sigma = 1.5;
  p.border_band_px = 10;
  p.seed = seed;
  return p;
}

CropperConfig small_cropper() {
  CropperConfig c;
  c.border_margin = 12;
  c.window_width = 80;
  c.window_height = 64;
  c.min_area = 60;
  return c;
}

}  // namespace

TEST_CASE("generation is deterministic under a fixed seed") {
  const auto a = generate(small_scene(42), 8);
  const auto b = generate(small_scene(42), 8);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frame == b[i].frame);
    CHECK(a[i].gaze.pitch_rad == b[i].gaze.pitch_rad);
    CHECK(a[i].gaze.yaw_rad == b[i].gaze.yaw_rad);
    CHECK(a[i].pupil_center == b[i].pupil_center);
  }
  const auto c = generate(small_scene(43), 8);
  CHECK(a[0].frame != c[0].frame);
}

TEST_CASE("zero gaze puts the pupil at the eyeball centre up to jitter") {
  SceneParams p = small_scene(5);
  p.pitch_limit_deg = 0;
  p.yaw_limit_deg = 0;
  const auto frames = generate(p, 6);
  for (const auto& f : frames) {
    CHECK(f.gaze.pitch_rad == 0.0);
    CHECK(f.gaze.yaw_rad == 0.0);
    REQUIRE(f.pupil_center.has_value());
    CHECK(std::abs(f.pupil_center->first - p.eye_cx) <= p.center_jitter_px);
    CHECK(std::abs(f.pupil_center->second - p.eye_cy) <= p.center_jitter_px);
  }
}

TEST_CASE("pupil is darker than iris which is darker than sclera") {
  SceneParams p = small_scene(9);
  p.noise_sigma = 0.0;
  p.eyelash_count = 0;
  const auto frames = generate(p, 4);
  for (const auto& f : frames) {
    REQUIRE(f.pupil_center.has_value());
    const auto [cx, cy] = *f.pupil_center;
    const auto sample = [&](double r, double phi) {
      const int x = static_cast<int>(std::lround(cx + r * std::cos(phi)));
      const int y = static_cast<int>(std::lround(cy + r * std::sin(phi)));
      return static_cast<int>(f.frame.at(x, y));
    };
    for (double phi : {0.0, 1.3, 2.7, 4.1}) {
      const int pupil = sample(2.0, phi);
      const int iris = sample(9.5, phi);  // between pupil max 7 and iris min 12
      CHECK(pupil < iris);
    }
    // Sclera sampled between the iris rim and the eyeball edge, towards the
    // eye centre so the probe stays inside the sclera disc.
    const int sclera = static_cast<int>(
        f.frame.at(static_cast<int>(p.eye_cx),
                   static_cast<int>(p.eye_cy + p.eye_radius - 6)));
    const int iris = sample(9.5, 0.0);
    CHECK(iris < sclera);
  }
}

TEST_CASE("scene validation names the violated invariant") {
  SceneParams p = small_scene();
  p.pupil_radius_min = p.pupil_radius_max = 30;  // exceeds iris radius
  CHECK_THROWS_AS(p.validate(), UserError);
  SceneParams q = small_scene();
  q.yaw_limit_deg = 89;  // pupil would leave the frame
  q.px_per_rad_x = 60;
  CHECK_THROWS_AS(q.validate(), UserError);
}

TEST_CASE("flip_right_eye mirrors only right-eye frames") {
  const auto frames = generate(small_scene(13), 2);
  const LabeledFrame& f = frames[0];

  const LabeledFrame left = flip_right_eye(f, Eye::Left);
  CHECK(left.frame == f.frame);
  CHECK(left.gaze.yaw_rad == f.gaze.yaw_rad);

  const LabeledFrame right = flip_right_eye(f, Eye::Right);
  CHECK(right.gaze.yaw_rad == -f.gaze.yaw_rad);
  CHECK(right.gaze.pitch_rad == f.gaze.pitch_rad);
  CHECK(right.frame.at(0, 0) == f.frame.at(f.frame.width - 1, 0));
  REQUIRE(right.pupil_center.has_value());
  CHECK(right.pupil_center->first ==
        Catch::Approx(f.frame.width - 1 - f.pupil_center->first));

  const LabeledFrame twice = flip_right_eye(right, Eye::Right);
  CHECK(twice.frame == f.frame);
  CHECK(twice.gaze.yaw_rad == f.gaze.yaw_rad);
  CHECK(twice.pupil_center->first == Catch::Approx(f.pupil_center->first));
}

TEST_CASE("degenerate augmentation reduces to normalization") {
  const auto frames = generate(small_scene(17), 1);
  AugmentConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.max_shift_frac = 0.0;
  Rng rng(3);
  const AugmentedFrame out = augment(frames[0], cfg, rng);
  const FloatImage direct = normalize_frame(frames[0].frame, cfg);
  REQUIRE(out.image.data.size() == direct.data.size());
  for (std::size_t i = 0; i < direct.data.size(); ++i)
    CHECK(out.image.data[i] == direct.data[i]);
  CHECK(out.gaze.pitch_rad == frames[0].gaze.pitch_rad);
  CHECK(out.gaze.yaw_rad == frames[0].gaze.yaw_rad);
}

TEST_CASE("augmentation preserves labels and is seed-deterministic") {
  const auto frames = generate(small_scene(19), 4);
  AugmentConfig cfg;
  for (const auto& f : frames) {
    Rng r1(99), r2(99);
    const AugmentedFrame a = augment(f, cfg, r1);
    const AugmentedFrame b = augment(f, cfg, r2);
    CHECK(a.gaze.pitch_rad == f.gaze.pitch_rad);
    CHECK(a.gaze.yaw_rad == f.gaze.yaw_rad);
    CHECK(a.image.data == b.image.data);
  }
}

TEST_CASE("normalized corpus mean approaches the configured target") {
  SceneParams p = small_scene(23);
  const auto frames = generate(p, 300);
  AugmentConfig cfg;

  // Calibrate the normalization constant against augmented draws (random
  // crops shed the dark border band, so full-frame statistics would be
  // biased), then check fresh draws standardize to the zero target.
  Rng calibration_rng(4);
  double raw_mean = 0;
  for (const auto& f : frames) {
    const GrayFrame g = augment_geometric(f.frame, cfg, calibration_rng);
    double s = 0;
    for (auto px : g.data) s += px;
    raw_mean += s / (255.0 * g.data.size());
  }
  raw_mean /= frames.size();

  cfg.norm_mean = raw_mean;  // target: zero-centred output
  Rng rng(5);
  double normalized_mean = 0;
  for (const auto& f : frames) {
    const AugmentedFrame a = augment(f, cfg, rng);
    double s = 0;
    for (double v : a.image.data) s += v;
    normalized_mean += s / a.image.data.size();
  }
  normalized_mean /= frames.size();
  CHECK(std::abs(normalized_mean) <= 0.05);
}

TEST_CASE("corpus round trips through disk") {
  const auto frames = generate(small_scene(29), 3);
  const std::string dir = "synth_rt_corpus";
  fs::remove_all(dir);
  save_corpus(dir, frames);
  const auto loaded = load_corpus(dir);
  CHECK(loaded.skipped == 0);
  REQUIRE(loaded.frames.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded.frames[i].frame == frames[i].frame);
    CHECK(loaded.frames[i].gaze.pitch_rad ==
          Catch::Approx(frames[i].gaze.pitch_rad).epsilon(1e-15));
    REQUIRE(loaded.frames[i].pupil_center.has_value());
    CHECK(loaded.frames[i].pupil_center->first ==
          Catch::Approx(frames[i].pupil_center->first).epsilon(1e-15));
  }
}

TEST_CASE("malformed label rows are skipped and counted") {
  const auto frames = generate(small_scene(31), 3);
  const std::string dir = "synth_badrow_corpus";
  fs::remove_all(dir);
  save_corpus(dir, frames);
  // Corrupt the middle row.
  std::ifstream in(fs::path(dir) / "labels.csv");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  in.close();
  REQUIRE(lines.size() == 4);
  lines[2] = "frame_00001.pgm,left,not_a_number";
  std::ofstream out(fs::path(dir) / "labels.csv");
  for (const auto& l : lines) out << l << "\n";
  out.close();

  const auto loaded = load_corpus(dir);
  CHECK(loaded.frames.size() == 2);
  CHECK(loaded.skipped == 1);
  CHECK_FALSE(loaded.warnings.empty());
}

TEST_CASE("empty directory loads as an empty corpus with a warning") {
  const std::string dir = "synth_empty_corpus";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto loaded = load_corpus(dir);
  CHECK(loaded.frames.empty());
  CHECK_FALSE(loaded.warnings.empty());
}

TEST_CASE("images without a labels file are an error") {
  const std::string dir = "synth_nolabels_corpus";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_pgm(generate(small_scene(37), 1)[0].frame,
           (fs::path(dir) / "stray.pgm").string());
  CHECK_THROWS_AS(load_corpus(dir), UserError);
}

TEST_CASE("cropper recovers generated pupil centres") {
  SceneParams p = small_scene(41);
  const auto frames = generate(p, 100);
  const CropperConfig cropper = small_cropper();
  int hits = 0;
  for (const auto& f : frames) {
    const auto cc = locate_pupil(f.frame, cropper);
    if (!cc) continue;
    REQUIRE(f.pupil_center.has_value());
    const double dx = cc->centroid_x - f.pupil_center->first;
    const double dy = cc->centroid_y - f.pupil_center->second;
    if (std::sqrt(dx * dx + dy * dy) <= 5.0) ++hits;
  }
  CHECK(hits >= 95);
}
