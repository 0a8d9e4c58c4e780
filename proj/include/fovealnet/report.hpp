#pragma once

// Markdown report rendering: an error-distribution table per evaluated model
// and a latency-vs-depth table per rendering condition.

#include <cstdio>
#include <string>
#include <vector>

#include "fovealnet/selector.hpp"
#include "fovealnet/trainer.hpp"

namespace fovealnet {

struct ErrorTableRow {
  std::string label;
  ErrorDistribution dist;
};

inline std::string render_error_table(const std::vector<ErrorTableRow>& rows) {
  std::string out =
      "| Model | Mean | P90 | P95 | Min | Max | Samples |\n"
      "|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf,
                  "| %s | %.2f | %.2f | %.2f | %.2f | %.2f | %zu |\n",
                  row.label.c_str(), row.dist.mean_deg, row.dist.p90_deg,
                  row.dist.p95_deg, row.dist.min_deg, row.dist.max_deg,
                  row.dist.count);
    out += buf;
  }
  return out;
}

struct DepthTableRow {
  int depth = 0;
  double t_tracking_ms = 0;
  double t_fr_ms = 0;
  double t_total_ms = 0;
  bool chosen = false;
};

inline std::string render_depth_table(const std::string& condition,
                                      const std::vector<DepthTableRow>& rows) {
  std::string out = "### " + condition + "\n\n";
  out +=
      "| Depth | T_tracking (ms) | T_fr (ms) | T_tracking+T_fr (ms) | "
      "Selected |\n|---|---|---|---|---|\n";
  char buf[200];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "| %d | %.3f | %.3f | %.3f | %s |\n",
                  row.depth, row.t_tracking_ms, row.t_fr_ms, row.t_total_ms,
                  row.chosen ? "*" : "");
    out += buf;
  }
  return out;
}

// Everything select() considers, row by row, with the argmin marked.
inline std::vector<DepthTableRow> depth_table_rows(
    const std::vector<DepthEntry>& depths, const SelectionQuery& query) {
  const Selection chosen = select(depths, query);
  std::vector<DepthEntry> sorted = depths;
  std::sort(sorted.begin(), sorted.end(),
            [](const DepthEntry& a, const DepthEntry& b) {
              return a.depth < b.depth;
            });
  std::vector<DepthTableRow> rows;
  for (const auto& entry : sorted) {
    DepthTableRow row;
    row.depth = entry.depth;
    row.t_tracking_ms = entry.t_tracking_ms;
    row.t_fr_ms = render_latency_for_depth(entry, query);
    row.t_total_ms = row.t_tracking_ms + row.t_fr_ms;
    row.chosen = entry.depth == chosen.depth;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace fovealnet
