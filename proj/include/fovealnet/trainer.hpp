#pragma once

// Training and evaluation loops: Adam with a step-decay schedule, early
// stopping on the validation metric each objective actually optimizes, the
// post-pruning fine-tune entry point, and angular-error summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fovealnet/cropper.hpp"
#include "fovealnet/errors.hpp"
#include "fovealnet/loss.hpp"
#include "fovealnet/model.hpp"
#include "fovealnet/synth.hpp"

namespace fovealnet {

enum class LossKind { Mse, SmoothMax, PerformanceAware, Multires };

inline std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::Mse: return "mse";
    case LossKind::SmoothMax: return "smooth_max";
    case LossKind::PerformanceAware: return "performance_aware";
    case LossKind::Multires: return "multires";
  }
  throw std::logic_error("unknown loss kind");
}

inline LossKind loss_kind_from_name(const std::string& name) {
  if (name == "mse") return LossKind::Mse;
  if (name == "smooth_max") return LossKind::SmoothMax;
  if (name == "performance_aware") return LossKind::PerformanceAware;
  if (name == "multires") return LossKind::Multires;
  throw UserError("unknown loss kind '" + name + "'");
}

struct TrainConfig {
  double lr = 5e-4;
  double adam_beta1 = 0.9;  // the paper's "momentum" read as first-moment decay
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double step_decay = 0.2;
  int decay_every_epochs = 10;
  int batch_size = 64;
  int max_epochs = 100;
  int patience = 10;
  double finetune_lr = 5e-5;
  int finetune_epochs = 50;
  // Global-norm gradient clip per optimizer step; 0 disables. Keeps the tiny
  // pre-norm models out of the dead-GELU collapse an early blow-up causes.
  double max_grad_norm = 1.0;
  LossKind loss = LossKind::Mse;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;

  void validate() const {
    if (!(lr > 0 && adam_beta1 > 0 && adam_beta2 > 0 && adam_eps > 0 &&
          step_decay > 0 && decay_every_epochs > 0 && batch_size > 0 &&
          max_epochs > 0 && patience > 0 && finetune_lr > 0 &&
          finetune_epochs > 0))
      throw UserError("TrainConfig: all numeric fields must be positive");
    if (max_grad_norm < 0)
      throw UserError("TrainConfig: max_grad_norm must be >= 0");
    if (patience > max_epochs)
      throw UserError("TrainConfig: patience must not exceed max_epochs");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw UserError("TrainConfig: val_fraction must be in (0, 1)");
  }

  double lr_at_epoch(int epoch) const {
    return lr * std::pow(step_decay, epoch / decay_every_epochs);
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"step_decay", c.step_decay},
                     {"decay_every_epochs", c.decay_every_epochs},
                     {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"finetune_lr", c.finetune_lr},
                     {"finetune_epochs", c.finetune_epochs},
                     {"max_grad_norm", c.max_grad_norm},
                     {"loss", loss_kind_name(c.loss)},
                     {"seed", c.seed},
                     {"val_fraction", c.val_fraction}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.step_decay = j.value("step_decay", c.step_decay);
  c.decay_every_epochs = j.value("decay_every_epochs", c.decay_every_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  if (j.contains("loss")) c.loss = loss_kind_from_name(j.at("loss"));
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
}

struct PipelineConfig {
  bool use_crop = true;
  bool use_augment = false;
  bool flip_right = true;
  CropperConfig cropper;
  AugmentConfig augment;
};

// ---------------------------------------------------------------------------
// Angular-error evaluation

struct ErrorDistribution {
  double mean_deg = 0;
  double p90_deg = 0;
  double p95_deg = 0;
  double min_deg = 0;
  double max_deg = 0;
  std::size_t count = 0;
};

inline void to_json(nlohmann::json& j, const ErrorDistribution& d) {
  j = nlohmann::json{{"mean_deg", d.mean_deg}, {"p90_deg", d.p90_deg},
                     {"p95_deg", d.p95_deg},   {"min_deg", d.min_deg},
                     {"max_deg", d.max_deg},   {"count", d.count}};
}

inline void from_json(const nlohmann::json& j, ErrorDistribution& d) {
  j.at("mean_deg").get_to(d.mean_deg);
  j.at("p90_deg").get_to(d.p90_deg);
  j.at("p95_deg").get_to(d.p95_deg);
  j.at("min_deg").get_to(d.min_deg);
  j.at("max_deg").get_to(d.max_deg);
  j.at("count").get_to(d.count);
}

// Eccentricity between the two gaze rays, via their 3D unit-vector
// reconstruction v = (cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw)).
inline double angular_error_deg(const GazeVector& pred,
                                const GazeVector& truth) {
  if (!(std::isfinite(pred.pitch_rad) && std::isfinite(pred.yaw_rad) &&
        std::isfinite(truth.pitch_rad) && std::isfinite(truth.yaw_rad)))
    throw std::domain_error("angular_error: non-finite gaze");
  auto ray = [](const GazeVector& g) {
    return Eigen::Vector3d(std::cos(g.pitch_rad) * std::sin(g.yaw_rad),
                           std::sin(g.pitch_rad),
                           std::cos(g.pitch_rad) * std::cos(g.yaw_rad));
  };
  const double dot = std::clamp(ray(pred).dot(ray(truth)), -1.0, 1.0);
  return rad2deg(std::acos(dot));
}

// Nearest-rank percentile: the ceil(p*n)-th smallest value.
inline double percentile_nearest_rank(const std::vector<double>& sorted,
                                      double p) {
  const std::size_t n = sorted.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(p * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

inline ErrorDistribution error_distribution(std::vector<double> errors_deg) {
  if (errors_deg.empty())
    throw UserError("error_distribution: empty error set");
  std::sort(errors_deg.begin(), errors_deg.end());
  ErrorDistribution d;
  d.count = errors_deg.size();
  double sum = 0;
  for (double e : errors_deg) sum += e;
  d.mean_deg = sum / static_cast<double>(d.count);
  d.min_deg = errors_deg.front();
  d.max_deg = errors_deg.back();
  d.p90_deg = percentile_nearest_rank(errors_deg, 0.90);
  d.p95_deg = percentile_nearest_rank(errors_deg, 0.95);
  return d;
}

// ---------------------------------------------------------------------------
// Dataset preparation (crop -> resize -> normalize, augmentation optional)

struct PreparedSample {
  GrayFrame base;    // post-crop, pre-resize; augmentation source
  FloatImage input;  // resized + normalized model input
  GazeVector label;
};

struct PreparedDataset {
  std::vector<PreparedSample> samples;
  int image_side = 0;
  AugmentConfig augment_cfg;
};

inline PreparedDataset prepare_dataset(const std::vector<LabeledFrame>& corpus,
                                       const ModelConfig& model_cfg,
                                       const PipelineConfig& pipeline) {
  PreparedDataset ds;
  ds.image_side = model_cfg.image_side;
  ds.augment_cfg = pipeline.augment;
  ds.samples.reserve(corpus.size());
  for (const auto& raw : corpus) {
    const LabeledFrame frame =
        pipeline.flip_right ? flip_right_eye(raw, raw.eye) : raw;
    PreparedSample sample;
    sample.label = frame.gaze;
    if (pipeline.use_crop) {
      // Frames where no pupil is found fall back to the full frame.
      auto window = locate_and_crop(frame.frame, pipeline.cropper);
      sample.base = window ? crop_region(frame.frame, window->x0, window->y0,
                                         window->width, window->height)
                           : frame.frame;
    } else {
      sample.base = frame.frame;
    }
    sample.input = normalize_frame(
        resize_bilinear(sample.base, ds.image_side, ds.image_side),
        pipeline.augment);
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

inline FloatImage training_input(const PreparedDataset& ds,
                                 const PreparedSample& sample, bool augment_on,
                                 Rng& rng) {
  if (!augment_on) return sample.input;
  GrayFrame aug = augment_geometric(sample.base, ds.augment_cfg, rng);
  return normalize_frame(resize_bilinear(aug, ds.image_side, ds.image_side),
                         ds.augment_cfg);
}

template <typename PredictFn>
ErrorDistribution evaluate_fn(PredictFn&& predict,
                              const std::vector<FloatImage>& inputs,
                              const std::vector<GazeVector>& labels) {
  if (inputs.empty()) throw UserError("evaluate: empty corpus");
  std::vector<double> errors;
  errors.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Eigen::Vector2d p = predict(inputs[i]);
    errors.push_back(
        angular_error_deg({p(0), p(1)}, labels[i]));
  }
  return error_distribution(std::move(errors));
}

inline ErrorDistribution evaluate(const GazeModel& model,
                                  const std::vector<FloatImage>& inputs,
                                  const std::vector<GazeVector>& labels) {
  return evaluate_fn(
      [&](const FloatImage& img) {
        return forward(model, img).by_exit.at(model.config.depth);
      },
      inputs, labels);
}

inline ErrorDistribution evaluate(const TruncatedModel& view,
                                  const std::vector<FloatImage>& inputs,
                                  const std::vector<GazeVector>& labels) {
  return evaluate_fn(
      [&](const FloatImage& img) { return view.predict(img); }, inputs,
      labels);
}

// ---------------------------------------------------------------------------
// Adam

class AdamOptimizer {
 public:
  AdamOptimizer(const TrainConfig& cfg, Parameters& params)
      : beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
    for (auto& ref : tensor_refs(params)) {
      m_.emplace_back(ref.size(), 0.0);
      v_.emplace_back(ref.size(), 0.0);
    }
  }

  void step(Parameters& params, const Parameters& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    auto prefs = tensor_refs(params);
    auto grefs = tensor_refs(grads);
    for (std::size_t k = 0; k < prefs.size(); ++k) {
      double* w = prefs[k].data;
      const double* g = grefs[k].data;
      auto& m = m_[k];
      auto& v = v_[k];
      for (long i = 0; i < prefs[k].size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_mean_deg = 0;
  double val_p95_deg = 0;
  double lr = 0;
};

struct TrainResult {
  GazeModel model;  // best-validation checkpoint
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_metric = 0;
};

inline void write_epoch_log_csv(const std::vector<EpochLog>& log,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write epoch log: " + path);
  out << "epoch,train_loss,val_mean_deg,val_p95_deg,lr\n";
  char buf[200];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch,
                  e.train_loss, e.val_mean_deg, e.val_p95_deg, e.lr);
    out << buf;
  }
}

namespace detail {

inline void fisher_yates(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = rng.next_u64() % i;
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace detail

inline TrainResult train(const GazeModel& initial,
                         const std::vector<LabeledFrame>& corpus,
                         const TrainConfig& cfg, const LossConfig& loss_cfg,
                         const PipelineConfig& pipeline) {
  cfg.validate();
  initial.config.validate();
  if (corpus.size() < 2) throw UserError("train: corpus too small to split");
  if ((cfg.loss == LossKind::PerformanceAware ||
       cfg.loss == LossKind::Multires) &&
      loss_cfg.profile == nullptr)
    throw UserError("train: latency-composed losses need a profile");

  const PreparedDataset ds = prepare_dataset(corpus, initial.config, pipeline);

  // Deterministic split: shuffle once, validation takes the tail.
  std::vector<std::size_t> order(ds.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  {
    Rng split_rng = Rng::stream(cfg.seed, 0xD5A7ULL);
    detail::fisher_yates(order, split_rng);
  }
  const std::size_t val_count = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::llround(cfg.val_fraction *
                          static_cast<double>(ds.samples.size()))));
  std::vector<std::size_t> train_idx(order.begin(), order.end() - val_count);
  std::vector<std::size_t> val_idx(order.end() - val_count, order.end());
  if (train_idx.empty()) throw UserError("train: empty training split");

  std::vector<FloatImage> val_inputs;
  std::vector<GazeVector> val_labels;
  for (std::size_t i : val_idx) {
    val_inputs.push_back(ds.samples[i].input);
    val_labels.push_back(ds.samples[i].label);
  }

  // Exits that participate in the objective.
  std::vector<int> loss_exits;
  if (cfg.loss == LossKind::Multires)
    loss_exits = initial.config.exit_blocks;
  else
    loss_exits = {initial.config.depth};
  std::sort(loss_exits.begin(), loss_exits.end());

  GazeModel model = initial;
  AdamOptimizer adam(cfg, model.params);

  TrainResult result;
  result.best_metric = std::numeric_limits<double>::infinity();
  GazeModel best = model;
  int stale_epochs = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    Rng epoch_rng = Rng::stream(cfg.seed, 0xE0000ULL + epoch);
    detail::fisher_yates(train_idx, epoch_rng);

    double loss_sum = 0;
    int batch_count = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(
          train_idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t bsz = end - start;

      std::vector<ForwardTrace> traces(bsz);
      std::vector<GazePrediction> preds(bsz);
      std::vector<GazeVector> labels(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto& sample = ds.samples[train_idx[start + b]];
        Rng aug_rng = Rng::stream(
            cfg.seed ^ 0xAU, static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                 train_idx[start + b]);
        const FloatImage input =
            training_input(ds, sample, pipeline.use_augment, aug_rng);
        preds[b] = forward(model, input, traces[b]);
        labels[b] = sample.label;
      }

      // Per-exit squared radian errors and the loss gradients over them.
      std::map<int, BatchErrors> errors;
      for (int l : loss_exits) {
        auto& xs = errors[l];
        xs.resize(bsz);
        for (std::size_t b = 0; b < bsz; ++b) {
          const Eigen::Vector2d diff =
              preds[b].by_exit.at(l) -
              Eigen::Vector2d(labels[b].pitch_rad, labels[b].yaw_rad);
          xs[b] = diff.squaredNorm();
          if (!std::isfinite(xs[b]))
            throw std::runtime_error("train: loss diverged at epoch " +
                                     std::to_string(epoch));
        }
      }

      double batch_loss = 0;
      std::map<int, std::vector<double>> dloss_dx;
      switch (cfg.loss) {
        case LossKind::Mse: {
          LossValue lv = mse_loss(errors.at(loss_exits[0]));
          batch_loss = lv.value;
          dloss_dx[loss_exits[0]] = std::move(lv.grad);
          break;
        }
        case LossKind::SmoothMax: {
          LossValue lv = smooth_max(errors.at(loss_exits[0]), loss_cfg.n_scale);
          batch_loss = lv.value;
          dloss_dx[loss_exits[0]] = std::move(lv.grad);
          break;
        }
        case LossKind::PerformanceAware: {
          LossValue lv =
              performance_aware_loss(errors.at(loss_exits[0]), loss_cfg);
          batch_loss = lv.value;
          dloss_dx[loss_exits[0]] = std::move(lv.grad);
          break;
        }
        case LossKind::Multires: {
          MultiresValue mv = multires_loss(errors, loss_cfg);
          batch_loss = mv.value;
          dloss_dx = std::move(mv.grad);
          break;
        }
      }
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: loss diverged at epoch " +
                                 std::to_string(epoch));

      Parameters grad_sum = detail::make_parameters(model.config);
      for (auto& ref : tensor_refs(grad_sum))
        std::fill(ref.data, ref.data + ref.size(), 0.0);
      for (std::size_t b = 0; b < bsz; ++b) {
        std::map<int, Eigen::Vector2d> dpred;
        for (const auto& [l, grads] : dloss_dx) {
          const Eigen::Vector2d diff =
              preds[b].by_exit.at(l) -
              Eigen::Vector2d(labels[b].pitch_rad, labels[b].yaw_rad);
          // d x_b / d pred = 2 (pred - label)
          dpred[l] = grads[b] * 2.0 * diff;
        }
        Parameters g = backward(model, traces[b], dpred);
        auto acc = tensor_refs(grad_sum);
        auto inc = tensor_refs(g);
        for (std::size_t k = 0; k < acc.size(); ++k)
          for (long i = 0; i < acc[k].size(); ++i)
            acc[k].data[i] += inc[k].data[i];
      }
      if (cfg.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const auto& ref : tensor_refs(grad_sum))
          for (long i = 0; i < ref.size(); ++i)
            sq += ref.data[i] * ref.data[i];
        const double norm = std::sqrt(sq);
        if (norm > cfg.max_grad_norm) {
          const double scale = cfg.max_grad_norm / norm;
          for (auto& ref : tensor_refs(grad_sum))
            for (long i = 0; i < ref.size(); ++i) ref.data[i] *= scale;
        }
      }
      adam.step(model.params, grad_sum, lr);
      loss_sum += batch_loss;
      ++batch_count;
    }

    const ErrorDistribution val = evaluate(model, val_inputs, val_labels);
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / std::max(batch_count, 1);
    entry.val_mean_deg = val.mean_deg;
    entry.val_p95_deg = val.p95_deg;
    entry.lr = lr;
    result.log.push_back(entry);

    const double metric =
        cfg.loss == LossKind::Mse ? val.mean_deg : val.p95_deg;
    if (metric < result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      best = model;
      stale_epochs = 0;
    } else {
      ++stale_epochs;
      if (stale_epochs >= cfg.patience) break;
    }
  }

  result.model = std::move(best);
  return result;
}

// Same loop with the fine-tuning overrides; requires an actually pruned model.
inline TrainResult finetune_pruned(const GazeModel& model,
                                   const std::vector<LabeledFrame>& corpus,
                                   const TrainConfig& cfg,
                                   const LossConfig& loss_cfg,
                                   const PipelineConfig& pipeline) {
  if (!(model.config.prune_ratio > 0.0))
    throw UserError("finetune_pruned: model has no pruning enabled");
  TrainConfig ft = cfg;
  ft.lr = cfg.finetune_lr;
  ft.max_epochs = cfg.finetune_epochs;
  ft.patience = std::min(cfg.patience, ft.max_epochs);
  return train(model, corpus, ft, loss_cfg, pipeline);
}

}  // namespace fovealnet
