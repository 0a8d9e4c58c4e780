#pragma once

// Analytical pupil localization and fixed-size informative-region cropping:
// border masking, inverse binarization, morphological opening, largest
// connected component, roundness test, window placement, and the
// frame-difference criterion that decides when a buffered result can be
// reused.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "fovealnet/errors.hpp"
#include "fovealnet/geometry.hpp"
#include "fovealnet/image.hpp"

namespace fovealnet {

struct PixelPoint {
  int x = 0;
  int y = 0;
};

struct ConnectedComponent {
  std::vector<PixelPoint> pixels;  // 8-connected, scan order of discovery
  long area = 0;
  double perimeter = 0.0;  // outer-boundary chain length, see trace below
  double centroid_x = 0.0;
  double centroid_y = 0.0;
  // First pixel in raster-scan order; the LCC tie-break anchor.
  PixelPoint anchor;
};

struct CropWindow {
  int x0 = 0;
  int y0 = 0;
  int width = 450;
  int height = 200;
  bool operator==(const CropWindow&) const = default;
};

struct EventParams {
  double beta1 = 0.2;  // relative-change activation threshold
  long beta2 = 500;    // active-pixel count threshold

  void validate() const {
    if (!(beta1 > 0.0)) throw UserError("EventParams: beta1 must be > 0");
    if (beta2 < 0) throw UserError("EventParams: beta2 must be >= 0");
  }
};

enum class EventDecision { Reuse, Recompute };

struct CropperConfig {
  int border_margin = 20;
  // Binarization threshold; unset selects an Otsu threshold computed on the
  // interior (the border-masked band excluded).
  std::optional<int> fixed_threshold;
  int kernel_radius = 2;  // 5x5 opening by default
  double min_roundness = 0.6;
  long min_area = 100;
  int window_width = 450;
  int window_height = 200;
};

// ---------------------------------------------------------------------------

// Pixels within `margin` of an edge are forced to white so that inverse
// binarization never picks up the dark background band around the eye.
inline GrayFrame border_mask(const GrayFrame& frame, int margin) {
  if (margin < 0) throw UserError("border_mask: margin must be >= 0");
  if (2 * margin >= std::min(frame.width, frame.height))
    throw UserError("border_mask: margin too large for frame");
  GrayFrame out = frame;
  for (int y = 0; y < frame.height; ++y) {
    const bool edge_row = y < margin || y >= frame.height - margin;
    for (int x = 0; x < frame.width; ++x) {
      if (edge_row || x < margin || x >= frame.width - margin)
        out.at(x, y) = 255;
    }
  }
  return out;
}

// Otsu's threshold over the interior rectangle (margin excluded). Returns a
// cut value T for use with the strict `intensity < T` convention below.
inline int otsu_threshold(const GrayFrame& frame, int margin = 0) {
  if (2 * margin >= std::min(frame.width, frame.height))
    throw UserError("otsu_threshold: margin too large for frame");
  long hist[256] = {0};
  long total = 0;
  for (int y = margin; y < frame.height - margin; ++y)
    for (int x = margin; x < frame.width - margin; ++x) {
      ++hist[frame.at(x, y)];
      ++total;
    }
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += static_cast<double>(i) * hist[i];
  double sum_low = 0.0;
  long count_low = 0;
  double best_var = -1.0;
  int best_t = 0;
  for (int t = 0; t < 256; ++t) {
    count_low += hist[t];
    sum_low += static_cast<double>(t) * hist[t];
    const long count_high = total - count_low;
    if (count_low == 0 || count_high == 0) continue;
    const double mu_low = sum_low / count_low;
    const double mu_high = (sum_all - sum_low) / count_high;
    const double var = static_cast<double>(count_low) * count_high *
                       (mu_low - mu_high) * (mu_low - mu_high);
    if (var > best_var) {  // strict: ties keep the smallest t
      best_var = var;
      best_t = t;
    }
  }
  return best_t + 1;  // class {I <= t} becomes {I < t+1}
}

inline BinaryMask inverse_binarize(const GrayFrame& frame, int threshold) {
  if (threshold < 0 || threshold > 255)
    throw UserError("inverse_binarize: threshold must be in [0, 255]");
  BinaryMask out(frame.width, frame.height);
  for (std::size_t i = 0; i < frame.data.size(); ++i)
    out.data[i] = frame.data[i] < threshold ? 1 : 0;
  return out;
}

namespace detail {

// Separable sliding min/max over a (2r+1) square; out-of-bounds counts as
// `pad`. Square structuring elements factor into a horizontal and a vertical
// pass.
inline BinaryMask window_extreme(const BinaryMask& m, int r, bool take_min,
                                 std::uint8_t pad) {
  BinaryMask tmp(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      std::uint8_t v = take_min ? 1 : 0;
      for (int dx = -r; dx <= r; ++dx) {
        const int xx = x + dx;
        const std::uint8_t s =
            (xx < 0 || xx >= m.width) ? pad : m.at(xx, y);
        v = take_min ? std::min(v, s) : std::max(v, s);
      }
      tmp.at(x, y) = v;
    }
  BinaryMask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      std::uint8_t v = take_min ? 1 : 0;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        const std::uint8_t s =
            (yy < 0 || yy >= m.height) ? pad : tmp.at(x, yy);
        v = take_min ? std::min(v, s) : std::max(v, s);
      }
      out.at(x, y) = v;
    }
  return out;
}

}  // namespace detail

inline BinaryMask erode(const BinaryMask& m, int radius) {
  if (radius < 0) throw UserError("erode: radius must be >= 0");
  if (radius == 0) return m;
  return detail::window_extreme(m, radius, /*take_min=*/true, /*pad=*/0);
}

inline BinaryMask dilate(const BinaryMask& m, int radius) {
  if (radius < 0) throw UserError("dilate: radius must be >= 0");
  if (radius == 0) return m;
  return detail::window_extreme(m, radius, /*take_min=*/false, /*pad=*/0);
}

inline BinaryMask morph_open(const BinaryMask& m, int kernel_radius) {
  return dilate(erode(m, kernel_radius), kernel_radius);
}

namespace detail {

// Outer-boundary chain length by Moore-neighbour tracing: axial steps count
// 1, diagonal steps sqrt(2). Terminates when the initial (position, step
// direction) pair repeats (Jacob's criterion). `inside` is the component
// bitmap; `start` must be its topmost-leftmost pixel.
inline double trace_perimeter(const std::vector<std::uint8_t>& inside, int w,
                              int h, PixelPoint start) {
  static constexpr int dx8[8] = {-1, -1, 0, 1, 1, 1, 0, -1};  // clockwise, W first
  static constexpr int dy8[8] = {0, -1, -1, -1, 0, 1, 1, 1};
  auto in = [&](int x, int y) {
    return x >= 0 && x < w && y >= 0 && y < h &&
           inside[static_cast<std::size_t>(y) * w + x];
  };
  auto next_move = [&](PixelPoint p, int back_dir) -> int {
    for (int s = 1; s <= 8; ++s) {
      const int d = (back_dir + s) % 8;
      if (in(p.x + dx8[d], p.y + dy8[d])) return d;
    }
    return -1;  // isolated pixel; handled by caller
  };

  // start is topmost-leftmost, so its west neighbour is outside.
  int back = 0;  // direction from start towards the backtrack point (west)
  const int first_dir = next_move(start, back);
  if (first_dir < 0) return 0.0;  // single pixel (caller substitutes 4)

  double length = 0.0;
  PixelPoint p = start;
  int dir = first_dir;
  long guard = 8 * static_cast<long>(w) * h + 16;
  while (guard-- > 0) {
    length += (dx8[dir] != 0 && dy8[dir] != 0) ? std::numbers::sqrt2 : 1.0;
    p = {p.x + dx8[dir], p.y + dy8[dir]};
    // The backtrack point is the neighbour examined just before `dir`,
    // re-expressed relative to the new position.
    const int prev_abs = (dir + 7) % 8;
    const PixelPoint bpt{p.x - dx8[dir] + dx8[prev_abs],
                         p.y - dy8[dir] + dy8[prev_abs]};
    back = -1;
    for (int d = 0; d < 8; ++d) {
      if (p.x + dx8[d] == bpt.x && p.y + dy8[d] == bpt.y) {
        back = d;
        break;
      }
    }
    dir = next_move(p, back);
    if (p.x == start.x && p.y == start.y && dir == first_dir) break;
  }
  return length;
}

}  // namespace detail

// 8-connected component of maximal area; ties resolved by raster-scan order
// of the component's first pixel. Empty masks yield nullopt.
inline std::optional<ConnectedComponent> largest_cc(const BinaryMask& mask) {
  const int w = mask.width, h = mask.height;
  std::vector<std::uint8_t> visited(mask.data.size(), 0);
  std::optional<ConnectedComponent> best;
  std::vector<PixelPoint> stack;
  for (int sy = 0; sy < h; ++sy) {
    for (int sx = 0; sx < w; ++sx) {
      const std::size_t si = static_cast<std::size_t>(sy) * w + sx;
      if (!mask.data[si] || visited[si]) continue;
      ConnectedComponent cc;
      cc.anchor = {sx, sy};
      stack.assign(1, cc.anchor);
      visited[si] = 1;
      double sum_x = 0.0, sum_y = 0.0;
      while (!stack.empty()) {
        const PixelPoint p = stack.back();
        stack.pop_back();
        cc.pixels.push_back(p);
        sum_x += p.x;
        sum_y += p.y;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int nx = p.x + dx, ny = p.y + dy;
            if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
            const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
            if (mask.data[ni] && !visited[ni]) {
              visited[ni] = 1;
              stack.push_back({nx, ny});
            }
          }
      }
      cc.area = static_cast<long>(cc.pixels.size());
      cc.centroid_x = sum_x / cc.area;
      cc.centroid_y = sum_y / cc.area;
      if (!best || cc.area > best->area) best = std::move(cc);
    }
  }
  if (best) {
    // Perimeter only for the winner; the bitmap restricts tracing to it.
    std::vector<std::uint8_t> bitmap(mask.data.size(), 0);
    for (const auto& p : best->pixels)
      bitmap[static_cast<std::size_t>(p.y) * w + p.x] = 1;
    if (best->area == 1) {
      best->perimeter = 4.0;
    } else {
      best->perimeter = detail::trace_perimeter(bitmap, w, h, best->anchor);
      if (best->perimeter <= 0.0) best->perimeter = 4.0;
    }
  }
  return best;
}

inline double roundness(const ConnectedComponent& cc) {
  if (cc.area < 1) throw std::logic_error("roundness: empty component");
  const double perimeter = cc.area == 1 ? 4.0 : cc.perimeter;
  return 4.0 * kPi * static_cast<double>(cc.area) / (perimeter * perimeter);
}

inline bool is_pupil(const ConnectedComponent& cc, double min_roundness,
                     long min_area) {
  return cc.area >= min_area && roundness(cc) >= min_roundness;
}

// Window of exactly (w, h) centred on `center`, translated by the minimal
// offset needed to stay inside the frame.
inline CropWindow crop_around(double center_x, double center_y, int w, int h,
                              int frame_w, int frame_h) {
  if (w > frame_w || h > frame_h)
    throw UserError("crop_around: window larger than frame");
  const int ix = static_cast<int>(std::lround(center_x));
  const int iy = static_cast<int>(std::lround(center_y));
  CropWindow win;
  win.width = w;
  win.height = h;
  win.x0 = std::clamp(ix - w / 2, 0, frame_w - w);
  win.y0 = std::clamp(iy - h / 2, 0, frame_h - h);
  return win;
}

// Per-pixel event map: active where |curr - prev| / max(prev, 1) > beta1.
inline BinaryMask event_map(const GrayFrame& curr, const GrayFrame& prev,
                            double beta1) {
  if (!curr.same_dims(prev))
    throw UserError("event_map: frame dimensions differ");
  BinaryMask out(curr.width, curr.height);
  for (std::size_t i = 0; i < curr.data.size(); ++i) {
    const double delta =
        std::abs(static_cast<int>(curr.data[i]) - static_cast<int>(prev.data[i]));
    const double denom = std::max<int>(prev.data[i], 1);
    out.data[i] = (delta / denom > beta1) ? 1 : 0;
  }
  return out;
}

inline EventDecision event_decision(const GrayFrame& curr,
                                    const GrayFrame& prev,
                                    const EventParams& params) {
  params.validate();
  const BinaryMask events = event_map(curr, prev, params.beta1);
  long active = 0;
  for (std::uint8_t v : events.data) active += v;
  return active > params.beta2 ? EventDecision::Recompute
                               : EventDecision::Reuse;
}

// ---------------------------------------------------------------------------
// Pipeline composition

inline std::optional<ConnectedComponent> locate_pupil(
    const GrayFrame& frame, const CropperConfig& cfg = {}) {
  const GrayFrame masked = border_mask(frame, cfg.border_margin);
  const int threshold = cfg.fixed_threshold
                            ? *cfg.fixed_threshold
                            : otsu_threshold(frame, cfg.border_margin);
  const BinaryMask binary = inverse_binarize(masked, threshold);
  const BinaryMask opened = morph_open(binary, cfg.kernel_radius);
  auto cc = largest_cc(opened);
  if (!cc || !is_pupil(*cc, cfg.min_roundness, cfg.min_area))
    return std::nullopt;
  return cc;
}

// nullopt means no component passed the pupil test; the caller is expected to
// fall back to its buffered result.
inline std::optional<CropWindow> locate_and_crop(
    const GrayFrame& frame, const CropperConfig& cfg = {}) {
  auto cc = locate_pupil(frame, cfg);
  if (!cc) return std::nullopt;
  return crop_around(cc->centroid_x, cc->centroid_y, cfg.window_width,
                     cfg.window_height, frame.width, frame.height);
}

// Single-writer streaming state: the previous frame buffer and the last
// successfully computed window. The previous frame is replaced only when a
// recompute produced a fresh window, so reuse never drifts silently.
class CropSession {
 public:
  CropSession(CropperConfig cfg, EventParams events)
      : cfg_(cfg), events_(events) {}

  struct StepResult {
    EventDecision decision = EventDecision::Recompute;
    std::optional<CropWindow> window;  // buffered or fresh
    bool fresh = false;                // window recomputed on this frame
  };

  StepResult step(const GrayFrame& frame) {
    StepResult result;
    if (prev_ && event_decision(frame, *prev_, events_) == EventDecision::Reuse) {
      result.decision = EventDecision::Reuse;
      result.window = buffered_;
      return result;
    }
    result.decision = EventDecision::Recompute;
    auto window = locate_and_crop(frame, cfg_);
    if (window) {
      buffered_ = window;
      prev_ = frame;
      result.fresh = true;
    }
    result.window = buffered_;
    return result;
  }

 private:
  CropperConfig cfg_;
  EventParams events_;
  std::optional<GrayFrame> prev_;
  std::optional<CropWindow> buffered_;
};

}  // namespace fovealnet
