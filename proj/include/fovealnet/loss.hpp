#pragma once

// Training objectives over per-sample squared gaze errors x_d (radians^2):
//
//   mse_loss           mean of x_d over the batch
//   smooth_max         (1/N) ln sum_d exp(N x_d), evaluated in shifted form
//                      m + (1/N) ln sum_d exp(N (x_d - m)), m = max x_d,
//                      so large N saturates to a hard max instead of
//                      overflowing
//   performance_aware  U(theta_i + rad2deg(sqrt(smooth_max))): the smoothed
//                      worst-case squared error becomes an error angle that
//                      inflates the foveal eccentricity fed to the rendering
//                      latency curve U
//   multires_loss      weighted sum of performance_aware over exit heads
//
// Every evaluation also returns d(value)/d(x_d); the trainer chains that into
// d/d(prediction) = grad_x * 2 (pred - label).

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "fovealnet/errors.hpp"
#include "fovealnet/geometry.hpp"

namespace fovealnet {

using BatchErrors = std::vector<double>;  // squared angular errors, radians^2

struct LossConfig {
  double n_scale = 100.0;  // temperature N of the soft max
  const LatencyProfile* profile = nullptr;
  double theta_i_deg = 5.0;
  std::map<int, double> exit_weights;  // absent exits weigh 1

  double weight_for(int exit_block) const {
    auto it = exit_weights.find(exit_block);
    return it == exit_weights.end() ? 1.0 : it->second;
  }
};

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // d value / d x_d
};

namespace detail {

inline void check_batch(const BatchErrors& batch, const char* who) {
  if (batch.empty()) throw UserError(std::string(who) + ": empty batch");
  for (double x : batch)
    if (!(std::isfinite(x) && x >= 0.0))
      throw std::domain_error(std::string(who) +
                              ": squared errors must be finite and >= 0");
}

}  // namespace detail

inline LossValue mse_loss(const BatchErrors& batch) {
  detail::check_batch(batch, "mse_loss");
  LossValue out;
  for (double x : batch) out.value += x;
  out.value /= static_cast<double>(batch.size());
  out.grad.assign(batch.size(), 1.0 / static_cast<double>(batch.size()));
  return out;
}

inline LossValue smooth_max(const BatchErrors& batch, double n_scale) {
  detail::check_batch(batch, "smooth_max");
  if (!(n_scale > 0.0)) throw UserError("smooth_max: N must be > 0");
  const double m = *std::max_element(batch.begin(), batch.end());
  double sum = 0.0;
  LossValue out;
  out.grad.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.grad[i] = std::exp(n_scale * (batch[i] - m));
    sum += out.grad[i];
  }
  for (double& g : out.grad) g /= sum;  // softmax(N x) weights
  out.value = m + std::log(sum) / n_scale;
  return out;
}

inline LossValue performance_aware_loss(const BatchErrors& batch,
                                        const LossConfig& cfg) {
  if (cfg.profile == nullptr)
    throw UserError("performance_aware_loss: no latency profile configured");
  LossValue sm = smooth_max(batch, cfg.n_scale);
  const double root = std::sqrt(sm.value);
  const double theta_f = cfg.theta_i_deg + rad2deg(root);
  const LatencyEval u = eval_latency_with_slope(*cfg.profile, theta_f);
  LossValue out;
  out.value = u.latency_ms;
  // d theta_f / d s = (180/pi) / (2 sqrt(s)); at s = 0 the loss sits at the
  // profile floor, where a zero subgradient is the sensible choice.
  const double chain =
      root > 0.0 ? u.slope_ms_per_deg * (180.0 / kPi) / (2.0 * root) : 0.0;
  out.grad.resize(sm.grad.size());
  for (std::size_t i = 0; i < sm.grad.size(); ++i)
    out.grad[i] = chain * sm.grad[i];
  return out;
}

struct MultiresValue {
  double value = 0.0;
  std::map<int, std::vector<double>> grad;  // per exit, d value / d x_d
};

inline MultiresValue multires_loss(
    const std::map<int, BatchErrors>& per_exit_batches, const LossConfig& cfg) {
  if (per_exit_batches.empty())
    throw UserError("multires_loss: no exit batches");
  for (const auto& [exit_block, weight] : cfg.exit_weights)
    if (!per_exit_batches.count(exit_block))
      throw UserError("multires_loss: missing batch for exit " +
                      std::to_string(exit_block));
  MultiresValue out;
  for (const auto& [exit_block, batch] : per_exit_batches) {
    const double w = cfg.weight_for(exit_block);
    LossValue term = performance_aware_loss(batch, cfg);
    out.value += w * term.value;
    auto& g = out.grad[exit_block];
    g.resize(term.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = w * term.grad[i];
  }
  return out;
}

}  // namespace fovealnet
