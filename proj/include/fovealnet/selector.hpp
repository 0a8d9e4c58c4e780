#pragma once

// Runtime subnetwork selection: pick the model depth minimizing tracking
// latency plus the rendering latency implied by that depth's error tail.

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fovealnet/errors.hpp"
#include "fovealnet/geometry.hpp"

namespace fovealnet {

struct DepthEntry {
  int depth = 0;
  double t_tracking_ms = 0;
  double p90_deg = 0;
  double p95_deg = 0;
  double flops = 0;
};

enum class ErrorPercentile { P90, P95 };

inline ErrorPercentile percentile_from_name(const std::string& name) {
  if (name == "P90" || name == "p90") return ErrorPercentile::P90;
  if (name == "P95" || name == "p95") return ErrorPercentile::P95;
  throw UserError("unknown percentile '" + name + "' (want P90 or P95)");
}

struct SelectionQuery {
  const LatencyProfile* profile = nullptr;
  ErrorPercentile percentile = ErrorPercentile::P95;
  double theta_i_deg = 5.0;
  double t_sensing_ms = 0.0;
  double t_comm_ms = 0.0;
};

// Rendering latency when the foveal region is inflated by this depth's error
// tail: U(theta_i + error percentile).
inline double render_latency_for_depth(const DepthEntry& entry,
                                       const SelectionQuery& query) {
  if (query.profile == nullptr)
    throw UserError("render_latency_for_depth: no latency profile");
  const double delta = query.percentile == ErrorPercentile::P90
                           ? entry.p90_deg
                           : entry.p95_deg;
  return eval_latency(*query.profile, query.theta_i_deg + delta);
}

struct Selection {
  int depth = 0;
  LatencyBudget budget;
};

// Exhaustive argmin of t_tracking + t_fr; ties go to the smaller depth
// (fewer FLOPs at equal latency).
inline Selection select(const std::vector<DepthEntry>& depths,
                        const SelectionQuery& query) {
  if (depths.empty()) throw UserError("select: empty depth profile");
  std::vector<DepthEntry> sorted = depths;
  std::sort(sorted.begin(), sorted.end(),
            [](const DepthEntry& a, const DepthEntry& b) {
              return a.depth < b.depth;
            });
  Selection best;
  double best_total = std::numeric_limits<double>::infinity();
  for (const auto& entry : sorted) {
    if (!(entry.t_tracking_ms > 0))
      throw UserError("select: tracking latency must be positive (depth " +
                      std::to_string(entry.depth) + ")");
    const double t_fr = render_latency_for_depth(entry, query);
    const double total = entry.t_tracking_ms + t_fr;
    if (total < best_total) {
      best_total = total;
      best.depth = entry.depth;
      best.budget = {query.t_sensing_ms, query.t_comm_ms, entry.t_tracking_ms,
                     t_fr};
    }
  }
  return best;
}

// CSV format: header "depth,t_tracking_ms,p90_deg,p95_deg,flops".
inline std::vector<DepthEntry> load_depth_profile_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open depth profile: " + path);
  std::string line;
  if (!std::getline(in, line)) throw UserError("empty depth profile: " + path);
  while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
    line.pop_back();
  if (line != "depth,t_tracking_ms,p90_deg,p95_deg,flops")
    throw UserError("bad header in depth profile " + path + ": " + line);
  std::vector<DepthEntry> entries;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    DepthEntry e;
    char c1, c2, c3, c4;
    if (!(row >> e.depth >> c1 >> e.t_tracking_ms >> c2 >> e.p90_deg >> c3 >>
          e.p95_deg >> c4 >> e.flops) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw UserError(path + ":" + std::to_string(lineno) +
                      ": malformed depth row '" + line + "'");
    entries.push_back(e);
  }
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (std::size_t j = i + 1; j < entries.size(); ++j)
      if (entries[i].depth == entries[j].depth)
        throw UserError(path + ": duplicate depth " +
                        std::to_string(entries[i].depth));
  return entries;
}

}  // namespace fovealnet
