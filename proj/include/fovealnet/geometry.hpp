#pragma once

// Foveal-region geometry, piecewise-linear render-latency curves U(.) and
// per-frame latency composition.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fovealnet/errors.hpp"

namespace fovealnet {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

// Display/viewing constants of one HMD setup. theta_i is the eccentricity
// angle subtended by the fovea, d the user-to-screen distance and rho the
// panel pixel density (pixels per length unit of d).
struct FovealGeometry {
  double theta_i_deg = 5.0;
  double d = 1.0;
  double rho = 1.0;

  void validate() const {
    if (!(theta_i_deg > 0.0 && theta_i_deg < 90.0))
      throw UserError("FovealGeometry: theta_i must lie in (0, 90) degrees");
    if (!(d > 0.0)) throw UserError("FovealGeometry: d must be positive");
    if (!(rho > 0.0)) throw UserError("FovealGeometry: rho must be positive");
  }
};

struct FovealRegion {
  double r_i = 0.0;        // error-free foveal radius, pixels
  double r_f = 0.0;        // inflated foveal radius, pixels
  double c = 0.0;          // error constant r_f - r_i, pixels
  double theta_f_deg = 0;  // resultant eccentricity
};

// Radii use r = rho * d * tan(theta) on both sides of the identity, so the
// error constant is c = rho*d*(tan(theta_i + dtheta) - tan(theta_i)).
inline FovealRegion foveal_radius(const FovealGeometry& geom,
                                  double delta_theta_deg) {
  geom.validate();
  if (delta_theta_deg < 0.0)
    throw std::domain_error("foveal_radius: delta_theta must be >= 0");
  const double theta_f = geom.theta_i_deg + delta_theta_deg;
  if (theta_f >= 90.0)
    throw std::domain_error(
        "foveal_radius: theta_i + delta_theta reaches 90 degrees");
  FovealRegion out;
  out.theta_f_deg = theta_f;
  out.r_i = geom.rho * geom.d * std::tan(deg2rad(geom.theta_i_deg));
  out.r_f = geom.rho * geom.d * std::tan(deg2rad(theta_f));
  out.c = out.r_f - out.r_i;
  return out;
}

struct LatencyBudget {
  double t_sensing_ms = 0.0;
  double t_comm_ms = 0.0;
  double t_tracking_ms = 0.0;
  double t_fr_ms = 0.0;
};

inline double total_latency(const LatencyBudget& b) {
  for (double v : {b.t_sensing_ms, b.t_comm_ms, b.t_tracking_ms, b.t_fr_ms}) {
    if (!(std::isfinite(v) && v >= 0.0))
      throw std::domain_error(
          "total_latency: components must be finite and non-negative");
  }
  return b.t_sensing_ms + b.t_comm_ms + b.t_tracking_ms + b.t_fr_ms;
}

// Monotone piecewise-linear map from foveal eccentricity (degrees) to
// rendering latency (ms). Between knots: linear interpolation. Below the
// first knot the first latency is held; above the last knot the last
// segment's slope extrapolates (render cost keeps growing with eccentricity).
struct LatencyProfile {
  std::vector<std::pair<double, double>> knots;  // (eccentricity_deg, ms)
  std::string device_label;
  std::string resolution_label = "custom";
};

inline bool is_known_resolution_label(const std::string& s) {
  return s == "720P" || s == "1080P" || s == "1440P" || s == "custom";
}

inline LatencyProfile fit_profile(
    std::vector<std::pair<double, double>> samples,
    std::string device_label = "", std::string resolution_label = "custom") {
  if (samples.size() < 2)
    throw UserError("fit_profile: need at least 2 samples");
  if (!is_known_resolution_label(resolution_label))
    throw UserError("fit_profile: unknown resolution label '" +
                    resolution_label + "'");
  std::sort(samples.begin(), samples.end());
  for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
    if (samples[i].first == samples[i + 1].first)
      throw UserError("fit_profile: duplicate eccentricity " +
                      std::to_string(samples[i].first));
  }
  for (const auto& [ecc, ms] : samples) {
    if (!(std::isfinite(ecc) && std::isfinite(ms)))
      throw UserError("fit_profile: non-finite sample");
    if (ms < 0.0)
      throw UserError("fit_profile: negative latency at eccentricity " +
                      std::to_string(ecc));
  }
  for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
    if (samples[i + 1].second < samples[i].second) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "fit_profile: latency not monotone between knots "
                    "(%g, %g) and (%g, %g)",
                    samples[i].first, samples[i].second, samples[i + 1].first,
                    samples[i + 1].second);
      throw UserError(buf);
    }
  }
  LatencyProfile profile;
  profile.knots = std::move(samples);
  profile.device_label = std::move(device_label);
  profile.resolution_label = std::move(resolution_label);
  return profile;
}

struct LatencyEval {
  double latency_ms = 0.0;
  double slope_ms_per_deg = 0.0;  // right-hand slope (defined everywhere)
};

inline LatencyEval eval_latency_with_slope(const LatencyProfile& profile,
                                           double theta_f_deg) {
  if (profile.knots.size() < 2)
    throw std::logic_error("eval_latency: profile has fewer than 2 knots");
  if (!(theta_f_deg >= 0.0))
    throw std::domain_error("eval_latency: eccentricity must be >= 0");
  const auto& k = profile.knots;
  const std::size_t n = k.size();
  if (theta_f_deg < k.front().first) return {k.front().second, 0.0};
  // Segment index: last i with k[i].x <= theta; the last segment extrapolates.
  std::size_t i = n - 2;
  if (theta_f_deg < k[n - 1].first) {
    i = static_cast<std::size_t>(
            std::upper_bound(k.begin(), k.end(), theta_f_deg,
                             [](double v, const auto& kn) { return v < kn.first; }) -
            k.begin()) -
        1;
  }
  const double slope =
      (k[i + 1].second - k[i].second) / (k[i + 1].first - k[i].first);
  return {k[i].second + (theta_f_deg - k[i].first) * slope, slope};
}

inline double eval_latency(const LatencyProfile& profile, double theta_f_deg) {
  return eval_latency_with_slope(profile, theta_f_deg).latency_ms;
}

// CSV format: header "eccentricity_deg,latency_ms", one knot per row.
inline LatencyProfile load_profile_csv(const std::string& path,
                                       std::string device_label = "",
                                       std::string resolution_label = "custom") {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open latency profile: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw UserError("empty latency profile: " + path);
  auto strip = [](std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    return s;
  };
  if (strip(line) != "eccentricity_deg,latency_ms")
    throw UserError("bad header in latency profile " + path + ": " + line);
  std::vector<std::pair<double, double>> samples;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty()) continue;
    std::istringstream row(line);
    double ecc, ms;
    char comma;
    if (!(row >> ecc >> comma >> ms) || comma != ',')
      throw UserError(path + ":" + std::to_string(lineno) +
                      ": malformed knot row '" + line + "'");
    samples.emplace_back(ecc, ms);
  }
  return fit_profile(std::move(samples), std::move(device_label),
                     std::move(resolution_label));
}

inline void save_profile_csv(const LatencyProfile& profile,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write latency profile: " + path);
  out << "eccentricity_deg,latency_ms\n";
  char buf[64];
  for (const auto& [ecc, ms] : profile.knots) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", ecc, ms);
    out << buf;
  }
}

}  // namespace fovealnet
