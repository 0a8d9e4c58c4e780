#pragma once

// Gaze-regression vision transformer with attention-score token pruning and
// early-exit heads, plus the explicit reverse pass used for training.
//
// Conventions used throughout:
//   * Token matrices are [n x D], one row per token; row 0 is the learnable
//     summary token whose representation feeds every prediction head.
//   * Linear layers apply as Y = X * W + b with W stored [in x out].
//   * Blocks are pre-norm: x += Attn(LN1(x)); x += MLP(LN2(x)).
//   * A single pruning event after block `prune_after_block` drops the
//     lowest-scoring patch tokens; the summary token always survives. The
//     selection is frozen during the reverse pass (dropped rows receive zero
//     gradient), which is what makes post-pruning fine-tuning well defined.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fovealnet/errors.hpp"
#include "fovealnet/image.hpp"
#include "fovealnet/rng.hpp"

namespace fovealnet {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

struct ModelConfig {
  int image_side = 224;
  int patch_side = 16;
  int depth = 8;
  int heads = 6;
  int embed_dim = 384;
  int mlp_ratio = 4;
  double prune_ratio = 0.0;   // fraction of patch tokens dropped, in [0, 1)
  int prune_after_block = 2;  // 1-based; pruning applies after this block
  std::vector<int> exit_blocks = {8};

  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int tokens() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / heads; }
  int mlp_hidden() const { return mlp_ratio * embed_dim; }
  int exit_hidden() const { return std::max(embed_dim / 2, 2); }

  // Patch tokens kept when pruning is active.
  int kept_patches() const {
    if (prune_ratio == 0.0) return num_patches();
    const double keep_ratio = 1.0 - prune_ratio;
    return static_cast<int>(std::ceil(keep_ratio * num_patches()));
  }

  void validate() const {
    if (image_side < 1 || patch_side < 1 || image_side % patch_side != 0)
      throw UserError("ModelConfig: image_side must be divisible by patch_side");
    if (depth < 1) throw UserError("ModelConfig: depth must be >= 1");
    if (heads < 1 || embed_dim % heads != 0)
      throw UserError("ModelConfig: embed_dim must be divisible by heads");
    if (mlp_ratio < 1) throw UserError("ModelConfig: mlp_ratio must be >= 1");
    if (!(prune_ratio >= 0.0 && prune_ratio < 1.0))
      throw UserError("ModelConfig: prune_ratio must be in [0, 1)");
    if (prune_after_block < 1)
      throw UserError("ModelConfig: prune_after_block must be >= 1");
    if (exit_blocks.empty())
      throw UserError("ModelConfig: exit_blocks must not be empty");
    for (int l : exit_blocks)
      if (l < 1 || l > depth)
        throw UserError("ModelConfig: exit block " + std::to_string(l) +
                        " outside 1..depth");
    if (std::find(exit_blocks.begin(), exit_blocks.end(), depth) ==
        exit_blocks.end())
      throw UserError("ModelConfig: final block must carry an exit head");
    std::vector<int> sorted = exit_blocks;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw UserError("ModelConfig: duplicate exit block");
  }

  bool has_exit(int l) const {
    return std::find(exit_blocks.begin(), exit_blocks.end(), l) !=
           exit_blocks.end();
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_side", c.image_side},
                     {"patch_side", c.patch_side},
                     {"depth", c.depth},
                     {"heads", c.heads},
                     {"embed_dim", c.embed_dim},
                     {"mlp_ratio", c.mlp_ratio},
                     {"prune_ratio", c.prune_ratio},
                     {"prune_after_block", c.prune_after_block},
                     {"exit_blocks", c.exit_blocks}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.image_side = j.value("image_side", c.image_side);
  c.patch_side = j.value("patch_side", c.patch_side);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.prune_ratio = j.value("prune_ratio", c.prune_ratio);
  c.prune_after_block = j.value("prune_after_block", c.prune_after_block);
  if (j.contains("exit_blocks"))
    c.exit_blocks = j.at("exit_blocks").get<std::vector<int>>();
}

struct BlockParams {
  Vec ln1_gamma, ln1_beta;
  Mat wq, wk, wv, wo;
  Vec bq, bk, bv, bo;
  Vec ln2_gamma, ln2_beta;
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
};

struct ExitParams {
  Vec ln_gamma, ln_beta;
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
};

struct Parameters {
  Mat patch_weight;   // [patch_side^2 x D]
  Vec patch_bias;     // [D]
  Mat pos_embed;      // [tokens x D]
  Vec summary_token;  // [D]
  std::vector<BlockParams> blocks;
  std::map<int, ExitParams> exits;
};

// Named view over every tensor, in a fixed order. Drives the optimizer, the
// checkpoint writer and the finite-difference harness.
struct TensorRef {
  std::string name;
  double* data;
  long rows;
  long cols;  // 1 for vectors
  long size() const { return rows * cols; }
};

inline std::vector<TensorRef> tensor_refs(Parameters& p) {
  std::vector<TensorRef> refs;
  auto add_m = [&](const std::string& name, Mat& m) {
    refs.push_back({name, m.data(), m.rows(), m.cols()});
  };
  auto add_v = [&](const std::string& name, Vec& v) {
    refs.push_back({name, v.data(), v.size(), 1});
  };
  add_m("patch_weight", p.patch_weight);
  add_v("patch_bias", p.patch_bias);
  add_m("pos_embed", p.pos_embed);
  add_v("summary_token", p.summary_token);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string b = "block" + std::to_string(i + 1) + ".";
    BlockParams& bp = p.blocks[i];
    add_v(b + "ln1_gamma", bp.ln1_gamma);
    add_v(b + "ln1_beta", bp.ln1_beta);
    add_m(b + "wq", bp.wq);
    add_v(b + "bq", bp.bq);
    add_m(b + "wk", bp.wk);
    add_v(b + "bk", bp.bk);
    add_m(b + "wv", bp.wv);
    add_v(b + "bv", bp.bv);
    add_m(b + "wo", bp.wo);
    add_v(b + "bo", bp.bo);
    add_v(b + "ln2_gamma", bp.ln2_gamma);
    add_v(b + "ln2_beta", bp.ln2_beta);
    add_m(b + "w1", bp.w1);
    add_v(b + "b1", bp.b1);
    add_m(b + "w2", bp.w2);
    add_v(b + "b2", bp.b2);
  }
  for (auto& [l, ep] : p.exits) {
    const std::string e = "exit" + std::to_string(l) + ".";
    add_v(e + "ln_gamma", ep.ln_gamma);
    add_v(e + "ln_beta", ep.ln_beta);
    add_m(e + "w1", ep.w1);
    add_v(e + "b1", ep.b1);
    add_m(e + "w2", ep.w2);
    add_v(e + "b2", ep.b2);
  }
  return refs;
}

inline std::vector<TensorRef> tensor_refs(const Parameters& p) {
  return tensor_refs(const_cast<Parameters&>(p));
}

namespace detail {

inline Parameters make_parameters(const ModelConfig& cfg) {
  Parameters p;
  const int d = cfg.embed_dim;
  p.patch_weight = Mat::Zero(cfg.patch_side * cfg.patch_side, d);
  p.patch_bias = Vec::Zero(d);
  p.pos_embed = Mat::Zero(cfg.tokens(), d);
  p.summary_token = Vec::Zero(d);
  p.blocks.resize(cfg.depth);
  for (auto& b : p.blocks) {
    b.ln1_gamma = Vec::Ones(d);
    b.ln1_beta = Vec::Zero(d);
    b.wq = Mat::Zero(d, d);
    b.wk = Mat::Zero(d, d);
    b.wv = Mat::Zero(d, d);
    b.wo = Mat::Zero(d, d);
    b.bq = Vec::Zero(d);
    b.bk = Vec::Zero(d);
    b.bv = Vec::Zero(d);
    b.bo = Vec::Zero(d);
    b.ln2_gamma = Vec::Ones(d);
    b.ln2_beta = Vec::Zero(d);
    b.w1 = Mat::Zero(d, cfg.mlp_hidden());
    b.b1 = Vec::Zero(cfg.mlp_hidden());
    b.w2 = Mat::Zero(cfg.mlp_hidden(), d);
    b.b2 = Vec::Zero(d);
  }
  for (int l : cfg.exit_blocks) {
    ExitParams e;
    e.ln_gamma = Vec::Ones(d);
    e.ln_beta = Vec::Zero(d);
    e.w1 = Mat::Zero(d, cfg.exit_hidden());
    e.b1 = Vec::Zero(cfg.exit_hidden());
    e.w2 = Mat::Zero(cfg.exit_hidden(), 2);
    e.b2 = Vec::Zero(2);
    p.exits.emplace(l, std::move(e));
  }
  return p;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)) +
         x * std::exp(-0.5 * x * x) * 0.39894228040143267794;
}

constexpr double kLnEps = 1e-5;

inline Mat layer_norm(const Mat& x, const Vec& gamma, const Vec& beta) {
  Mat out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (long i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / n;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    out.row(i) = ((x.row(i).array() - mu) * inv) * gamma.transpose().array() +
                 beta.transpose().array();
  }
  return out;
}

// Accumulates dgamma/dbeta and returns dx. Statistics are recomputed from the
// cached input; the trace stays small.
inline Mat layer_norm_backward(const Mat& dy, const Mat& x, const Vec& gamma,
                               Vec& dgamma, Vec& dbeta) {
  Mat dx(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (long i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / n;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    const Eigen::ArrayXd xhat = (x.row(i).transpose().array() - mu) * inv;
    const Eigen::ArrayXd dyr = dy.row(i).transpose().array();
    dgamma.array() += dyr * xhat;
    dbeta.array() += dyr;
    const Eigen::ArrayXd dxhat = dyr * gamma.array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * xhat).mean();
    dx.row(i) = ((dxhat - m1 - xhat * m2) * inv).matrix().transpose();
  }
  return dx;
}

inline void softmax_rows(Mat& m) {
  for (long i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

}  // namespace detail

struct GazeModel {
  ModelConfig config;
  Parameters params;

  static GazeModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    GazeModel model;
    model.config = cfg;
    model.params = detail::make_parameters(cfg);
    // Weight matrices, positions and the summary token draw from N(0, 0.02);
    // gains stay at one, biases and shifts at zero.
    Rng rng(seed);
    for (auto& ref : tensor_refs(model.params)) {
      const auto& n = ref.name;
      const bool frozen = n.find("gamma") != std::string::npos ||
                          n.find("beta") != std::string::npos ||
                          n.find("bias") != std::string::npos ||
                          n.find(".b") != std::string::npos;
      if (frozen) continue;
      for (long i = 0; i < ref.size(); ++i) ref.data[i] = rng.normal(0.0, 0.02);
    }
    return model;
  }

  long parameter_count() const {
    long total = 0;
    for (const auto& ref : tensor_refs(params)) total += ref.size();
    return total;
  }

  // Copy with a different prune setting; shapes are unaffected, so trained
  // weights carry over (this is the fine-tuning entry point).
  GazeModel with_prune_ratio(double ratio, int after_block) const {
    GazeModel out = *this;
    out.config.prune_ratio = ratio;
    out.config.prune_after_block = after_block;
    out.config.validate();
    return out;
  }
};

// ---------------------------------------------------------------------------
// Tokens and pruning

struct TokenSet {
  Mat latents;                  // [n x D], row 0 = summary token
  std::vector<int> patch_index;  // original patch per row; -1 for the summary
};

inline TokenSet patchify(const GazeModel& model, const FloatImage& image) {
  const ModelConfig& cfg = model.config;
  if (image.width != cfg.image_side || image.height != cfg.image_side)
    throw UserError("patchify: input must be " +
                    std::to_string(cfg.image_side) + "x" +
                    std::to_string(cfg.image_side));
  const int ps = cfg.patch_side;
  const int per_side = cfg.patches_per_side();
  const int n_patches = cfg.num_patches();
  TokenSet tokens;
  tokens.latents = Mat(n_patches + 1, cfg.embed_dim);
  tokens.patch_index.resize(n_patches + 1);
  tokens.patch_index[0] = -1;
  tokens.latents.row(0) =
      model.params.summary_token.transpose() + model.params.pos_embed.row(0);
  RowVec patch(ps * ps);
  for (int k = 0; k < n_patches; ++k) {
    const int py = k / per_side, px = k % per_side;
    for (int y = 0; y < ps; ++y)
      for (int x = 0; x < ps; ++x)
        patch(y * ps + x) = image.at(px * ps + x, py * ps + y);
    tokens.latents.row(k + 1) = patch * model.params.patch_weight +
                                model.params.patch_bias.transpose() +
                                model.params.pos_embed.row(k + 1);
    tokens.patch_index[k + 1] = k;
  }
  return tokens;
}

// Keeps the summary token plus the ceil(keep_ratio * (n-1)) highest-scoring
// patch tokens. Ties go to the lower original patch index; relative order is
// preserved. `scores` holds one entry per non-summary row, in row order.
inline TokenSet prune_tokens(const TokenSet& tokens,
                             const std::vector<double>& scores,
                             double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
    throw UserError("prune_tokens: keep_ratio must be in (0, 1]");
  const long n = tokens.latents.rows();
  if (static_cast<long>(scores.size()) != n - 1)
    throw UserError("prune_tokens: need one score per patch token");
  const long keep =
      static_cast<long>(std::ceil(keep_ratio * static_cast<double>(n - 1)));
  std::vector<long> order(n - 1);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return tokens.patch_index[a + 1] < tokens.patch_index[b + 1];
  });
  order.resize(static_cast<std::size_t>(std::min<long>(keep, n - 1)));
  std::sort(order.begin(), order.end());  // restore original relative order
  TokenSet out;
  out.latents = Mat(static_cast<long>(order.size()) + 1, tokens.latents.cols());
  out.patch_index.resize(order.size() + 1);
  out.latents.row(0) = tokens.latents.row(0);
  out.patch_index[0] = -1;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.latents.row(static_cast<long>(i) + 1) = tokens.latents.row(order[i] + 1);
    out.patch_index[i + 1] = tokens.patch_index[order[i] + 1];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct GazePrediction {
  std::map<int, Eigen::Vector2d> by_exit;
};

struct BlockTrace {
  Mat x_in, xn1, q, k, v;
  std::vector<Mat> attn;  // per-head softmax probabilities [n x n]
  Mat concat, x_mid, xn2, h_pre, h_act, x_out;
};

struct ExitTrace {
  RowVec summary_in;  // pre-LN summary row
  RowVec normed, h_pre, h_act;
  Eigen::Vector2d pred;
};

struct ForwardTrace {
  Mat patches;             // raw patch pixel rows [num_patches x patch_side^2]
  Mat tokens0;             // embedded tokens incl. positions
  std::vector<BlockTrace> blocks;
  std::map<int, ExitTrace> exits;
  int prune_boundary = -1;        // block index after which pruning happened
  std::vector<long> kept_rows;    // row indices surviving the pruning event
  std::vector<double> prune_scores;
};

namespace detail {

inline void run_exit(const ExitParams& ep, const RowVec& summary, ExitTrace& t) {
  t.summary_in = summary;
  Mat row = summary;
  t.normed = layer_norm(row, ep.ln_gamma, ep.ln_beta).row(0);
  t.h_pre = t.normed * ep.w1 + ep.b1.transpose();
  t.h_act = t.h_pre.unaryExpr([](double v) { return gelu(v); });
  const RowVec out = t.h_act * ep.w2 + ep.b2.transpose();
  t.pred = Eigen::Vector2d(out(0), out(1));
}

// Shared forward core: runs blocks 1..max_depth and evaluates the configured
// exits in that range. Identical code path for full and truncated inference,
// which is what makes early-exit consistency exact.
inline GazePrediction run_forward(const GazeModel& model,
                                  const FloatImage& image, int max_depth,
                                  ForwardTrace* trace) {
  const ModelConfig& cfg = model.config;
  const Parameters& p = model.params;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  TokenSet tokens = patchify(model, image);
  if (trace) {
    const int ps = cfg.patch_side;
    const int per_side = cfg.patches_per_side();
    trace->patches = Mat(cfg.num_patches(), ps * ps);
    for (int k = 0; k < cfg.num_patches(); ++k) {
      const int py = k / per_side, px = k % per_side;
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          trace->patches(k, y * ps + x) = image.at(px * ps + x, py * ps + y);
    }
    trace->tokens0 = tokens.latents;
    trace->blocks.resize(max_depth);
  }

  GazePrediction pred;
  Mat x = std::move(tokens.latents);
  std::vector<int> patch_index = std::move(tokens.patch_index);

  for (int l = 1; l <= max_depth; ++l) {
    const BlockParams& bp = p.blocks[l - 1];
    BlockTrace local;
    BlockTrace& bt = trace ? trace->blocks[l - 1] : local;
    bt.x_in = x;
    bt.xn1 = layer_norm(x, bp.ln1_gamma, bp.ln1_beta);
    bt.q = bt.xn1 * bp.wq;
    bt.q.rowwise() += bp.bq.transpose();
    bt.k = bt.xn1 * bp.wk;
    bt.k.rowwise() += bp.bk.transpose();
    bt.v = bt.xn1 * bp.wv;
    bt.v.rowwise() += bp.bv.transpose();
    const long n = x.rows();
    bt.concat = Mat(n, cfg.embed_dim);
    bt.attn.assign(cfg.heads, Mat());
    for (int h = 0; h < cfg.heads; ++h) {
      const auto qh = bt.q.middleCols(h * dh, dh);
      const auto kh = bt.k.middleCols(h * dh, dh);
      const auto vh = bt.v.middleCols(h * dh, dh);
      Mat logits = qh * kh.transpose() * scale;
      softmax_rows(logits);
      bt.attn[h] = std::move(logits);
      bt.concat.middleCols(h * dh, dh) = bt.attn[h] * vh;
    }
    Mat attn_out = bt.concat * bp.wo;
    attn_out.rowwise() += bp.bo.transpose();
    bt.x_mid = x + attn_out;
    bt.xn2 = layer_norm(bt.x_mid, bp.ln2_gamma, bp.ln2_beta);
    bt.h_pre = bt.xn2 * bp.w1;
    bt.h_pre.rowwise() += bp.b1.transpose();
    bt.h_act = bt.h_pre.unaryExpr([](double v) { return gelu(v); });
    Mat mlp_out = bt.h_act * bp.w2;
    mlp_out.rowwise() += bp.b2.transpose();
    bt.x_out = bt.x_mid + mlp_out;
    x = bt.x_out;

    if (trace && !x.allFinite())
      throw std::runtime_error("forward: non-finite activations in block " +
                               std::to_string(l));

    if (cfg.has_exit(l)) {
      ExitTrace local_exit;
      ExitTrace& et = trace ? trace->exits[l] : local_exit;
      run_exit(p.exits.at(l), x.row(0), et);
      pred.by_exit[l] = et.pred;
    }

    // Single pruning event; only applies when later blocks will consume the
    // reduced token set.
    if (cfg.prune_ratio > 0.0 && l == cfg.prune_after_block && l < max_depth) {
      const BlockTrace& src = bt;
      const long nn = x.rows();
      std::vector<double> scores(static_cast<std::size_t>(nn - 1), 0.0);
      for (int h = 0; h < cfg.heads; ++h)
        for (long j = 1; j < nn; ++j)
          scores[static_cast<std::size_t>(j - 1)] += src.attn[h](0, j);
      for (auto& s : scores) s /= cfg.heads;

      TokenSet current{std::move(x), patch_index};
      TokenSet pruned = prune_tokens(current, scores, 1.0 - cfg.prune_ratio);
      // Recover which rows survived, for the reverse scatter.
      std::vector<long> kept;
      kept.reserve(pruned.patch_index.size());
      kept.push_back(0);
      std::size_t cursor = 1;
      for (std::size_t i = 1; i < pruned.patch_index.size(); ++i) {
        while (current.patch_index[cursor] != pruned.patch_index[i]) ++cursor;
        kept.push_back(static_cast<long>(cursor));
      }
      if (trace) {
        trace->prune_boundary = l;
        trace->kept_rows = kept;
        trace->prune_scores = scores;
      }
      x = std::move(pruned.latents);
      patch_index = std::move(pruned.patch_index);
    }
  }
  return pred;
}

}  // namespace detail

inline GazePrediction forward(const GazeModel& model, const FloatImage& image) {
  return detail::run_forward(model, image, model.config.depth, nullptr);
}

inline GazePrediction forward(const GazeModel& model, const FloatImage& image,
                              ForwardTrace& trace) {
  return detail::run_forward(model, image, model.config.depth, &trace);
}

// Gradient of a scalar loss w.r.t. every parameter, given the per-exit
// gradients of that loss w.r.t. the 2D predictions. Exits absent from
// `dpred` contribute nothing (their heads receive zero gradient).
inline Parameters backward(const GazeModel& model, const ForwardTrace& trace,
                           const std::map<int, Eigen::Vector2d>& dpred) {
  const ModelConfig& cfg = model.config;
  const Parameters& p = model.params;
  Parameters grad = detail::make_parameters(cfg);
  for (auto& ref : tensor_refs(grad))
    std::fill(ref.data, ref.data + ref.size(), 0.0);

  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int depth = static_cast<int>(trace.blocks.size());

  Mat dx = Mat::Zero(trace.blocks[depth - 1].x_out.rows(), cfg.embed_dim);

  for (int l = depth; l >= 1; --l) {
    const BlockParams& bp = p.blocks[l - 1];
    const BlockTrace& bt = trace.blocks[l - 1];
    BlockParams& gb = grad.blocks[l - 1];

    // Undo the pruning gather: dropped rows get zero gradient.
    if (trace.prune_boundary == l) {
      Mat unpruned = Mat::Zero(bt.x_out.rows(), cfg.embed_dim);
      for (std::size_t i = 0; i < trace.kept_rows.size(); ++i)
        unpruned.row(trace.kept_rows[i]) = dx.row(static_cast<long>(i));
      dx = std::move(unpruned);
    }

    // Exit head contribution lands on the summary row of this block's output.
    auto exit_it = dpred.find(l);
    if (exit_it != dpred.end()) {
      if (!cfg.has_exit(l))
        throw std::logic_error("backward: gradient for non-exit block " +
                               std::to_string(l));
      const ExitParams& ep = p.exits.at(l);
      ExitParams& ge = grad.exits.at(l);
      const ExitTrace& et = trace.exits.at(l);
      const RowVec dout = exit_it->second.transpose();
      ge.w2 += et.h_act.transpose() * dout;
      ge.b2 += dout.transpose();
      RowVec dh_act = dout * ep.w2.transpose();
      RowVec dh_pre(dh_act.size());
      for (long i = 0; i < dh_pre.size(); ++i)
        dh_pre(i) = dh_act(i) * detail::gelu_grad(et.h_pre(i));
      ge.w1 += et.normed.transpose() * dh_pre;
      ge.b1 += dh_pre.transpose();
      const RowVec dnormed = dh_pre * ep.w1.transpose();
      Mat dsum = detail::layer_norm_backward(dnormed, Mat(et.summary_in),
                                             ep.ln_gamma, ge.ln_gamma,
                                             ge.ln_beta);
      dx.row(0) += dsum.row(0);
    }

    // MLP branch.
    const Mat& d_xout = dx;
    gb.w2 += bt.h_act.transpose() * d_xout;
    gb.b2 += d_xout.colwise().sum().transpose();
    Mat dh_act = d_xout * bp.w2.transpose();
    Mat dh_pre = dh_act.binaryExpr(bt.h_pre, [](double g, double h) {
      return g * detail::gelu_grad(h);
    });
    gb.w1 += bt.xn2.transpose() * dh_pre;
    gb.b1 += dh_pre.colwise().sum().transpose();
    const Mat dxn2 = dh_pre * bp.w1.transpose();
    Mat dx_mid = d_xout + detail::layer_norm_backward(dxn2, bt.x_mid,
                                                      bp.ln2_gamma,
                                                      gb.ln2_gamma, gb.ln2_beta);

    // Attention branch.
    const Mat& d_attn_out = dx_mid;
    gb.wo += bt.concat.transpose() * d_attn_out;
    gb.bo += d_attn_out.colwise().sum().transpose();
    const Mat dconcat = d_attn_out * bp.wo.transpose();
    const long n = bt.x_in.rows();
    Mat dq = Mat::Zero(n, cfg.embed_dim);
    Mat dk = Mat::Zero(n, cfg.embed_dim);
    Mat dv = Mat::Zero(n, cfg.embed_dim);
    for (int h = 0; h < cfg.heads; ++h) {
      const auto qh = bt.q.middleCols(h * dh, dh);
      const auto kh = bt.k.middleCols(h * dh, dh);
      const auto vh = bt.v.middleCols(h * dh, dh);
      const Mat& probs = bt.attn[h];
      const auto doh = dconcat.middleCols(h * dh, dh);
      const Mat dprobs = doh * vh.transpose();
      dv.middleCols(h * dh, dh) = probs.transpose() * doh;
      const Vec rowdot = (probs.array() * dprobs.array()).rowwise().sum();
      const Mat dlogits =
          (probs.array() * (dprobs.array().colwise() - rowdot.array())).matrix();
      dq.middleCols(h * dh, dh) = dlogits * kh * scale;
      dk.middleCols(h * dh, dh) = dlogits.transpose() * qh * scale;
    }
    gb.wq += bt.xn1.transpose() * dq;
    gb.bq += dq.colwise().sum().transpose();
    gb.wk += bt.xn1.transpose() * dk;
    gb.bk += dk.colwise().sum().transpose();
    gb.wv += bt.xn1.transpose() * dv;
    gb.bv += dv.colwise().sum().transpose();
    const Mat dxn1 = dq * bp.wq.transpose() + dk * bp.wk.transpose() +
                     dv * bp.wv.transpose();
    dx = dx_mid + detail::layer_norm_backward(dxn1, bt.x_in, bp.ln1_gamma,
                                              gb.ln1_gamma, gb.ln1_beta);
  }

  // Embedding stage. Row k+1 of tokens0 came from patch k; row 0 from the
  // summary token. Positional embeddings add directly.
  grad.pos_embed += dx;
  grad.summary_token += dx.row(0).transpose();
  grad.patch_weight += trace.patches.transpose() * dx.bottomRows(dx.rows() - 1);
  grad.patch_bias += dx.bottomRows(dx.rows() - 1).colwise().sum().transpose();

  for (const auto& ref : tensor_refs(grad))
    for (long i = 0; i < ref.size(); ++i)
      if (!std::isfinite(ref.data[i]))
        throw std::runtime_error("backward: non-finite gradient in " + ref.name);
  return grad;
}

// ---------------------------------------------------------------------------
// Truncated (early-exit) view

class TruncatedModel {
 public:
  TruncatedModel(const GazeModel& parent, int depth)
      : parent_(&parent), depth_(depth) {
    if (!parent.config.has_exit(depth))
      throw UserError("truncate: block " + std::to_string(depth) +
                      " has no exit head");
  }

  Eigen::Vector2d predict(const FloatImage& image) const {
    GazePrediction pred =
        detail::run_forward(*parent_, image, depth_, nullptr);
    return pred.by_exit.at(depth_);
  }

  int depth() const { return depth_; }

  // Tensors actually used by this view: embedding stage, blocks 1..depth and
  // the depth's own exit head.
  long parameter_count() const {
    const Parameters& p = parent_->params;
    long total = p.patch_weight.size() + p.patch_bias.size() +
                 p.pos_embed.size() + p.summary_token.size();
    auto block_size = [](const BlockParams& b) {
      return b.ln1_gamma.size() + b.ln1_beta.size() + b.wq.size() +
             b.bq.size() + b.wk.size() + b.bk.size() + b.wv.size() +
             b.bv.size() + b.wo.size() + b.bo.size() + b.ln2_gamma.size() +
             b.ln2_beta.size() + b.w1.size() + b.b1.size() + b.w2.size() +
             b.b2.size();
    };
    for (int l = 1; l <= depth_; ++l) total += block_size(p.blocks[l - 1]);
    const ExitParams& e = p.exits.at(depth_);
    total += e.ln_gamma.size() + e.ln_beta.size() + e.w1.size() +
             e.b1.size() + e.w2.size() + e.b2.size();
    return total;
  }

 private:
  const GazeModel* parent_;
  int depth_;
};

inline TruncatedModel truncate(const GazeModel& model, int depth) {
  return TruncatedModel(model, depth);
}

// ---------------------------------------------------------------------------
// FLOPs estimator (multiply-accumulate counts)

inline std::uint64_t flops_estimate(const ModelConfig& cfg, int depth) {
  cfg.validate();
  if (depth < 1 || depth > cfg.depth)
    throw UserError("flops_estimate: depth outside 1..L");
  const std::uint64_t d = static_cast<std::uint64_t>(cfg.embed_dim);
  const std::uint64_t n_full = static_cast<std::uint64_t>(cfg.tokens());
  const std::uint64_t n_pruned =
      static_cast<std::uint64_t>(cfg.kept_patches()) + 1;
  auto block_macs = [&](std::uint64_t n) {
    const std::uint64_t qkv_out = 4 * n * d * d;
    const std::uint64_t attn = 2 * n * n * d;  // logits + prob*value
    const std::uint64_t mlp =
        2 * n * d * d * static_cast<std::uint64_t>(cfg.mlp_ratio);
    return qkv_out + attn + mlp;
  };
  const std::uint64_t embed = static_cast<std::uint64_t>(cfg.num_patches()) *
                              static_cast<std::uint64_t>(cfg.patch_side) *
                              static_cast<std::uint64_t>(cfg.patch_side) * d;
  std::uint64_t total = embed;
  for (int l = 1; l <= depth; ++l) {
    const bool pruned = cfg.prune_ratio > 0.0 && l > cfg.prune_after_block;
    total += block_macs(pruned ? n_pruned : n_full);
  }
  const std::uint64_t head =
      d * static_cast<std::uint64_t>(cfg.exit_hidden()) +
      static_cast<std::uint64_t>(cfg.exit_hidden()) * 2;
  return total + head;
}

// ---------------------------------------------------------------------------
// Checkpoint container: little-endian binary, JSON config + named f64 tensors.
// Layout (all integers little-endian):
//   magic "FVNCKPT1" | u32 config_len | config JSON | u32 tensor_count |
//   per tensor: u32 name_len | name | u32 ndim=2 | u64 rows | u64 cols |
//               f64 data (column-major, rows*cols)

namespace detail {

template <typename T>
void write_le(std::ofstream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  // Hosts here are little-endian; byte order is part of the format.
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void save_checkpoint(const GazeModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write checkpoint: " + path);
  out.write("FVNCKPT1", 8);
  const std::string cfg = nlohmann::json(model.config).dump();
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto refs = tensor_refs(model.params);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(refs.size()));
  for (const auto& ref : refs) {
    detail::write_le<std::uint32_t>(out,
                                    static_cast<std::uint32_t>(ref.name.size()));
    out.write(ref.name.data(), static_cast<std::streamsize>(ref.name.size()));
    detail::write_le<std::uint32_t>(out, 2);
    detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(ref.rows));
    detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(ref.cols));
    out.write(reinterpret_cast<const char*>(ref.data),
              static_cast<std::streamsize>(ref.size() * sizeof(double)));
  }
  if (!out) throw UserError("checkpoint write failed: " + path);
}

inline GazeModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, "FVNCKPT1", 8) != 0)
    throw UserError(path + ": not a FVNCKPT1 checkpoint");
  const auto cfg_len = detail::read_le<std::uint32_t>(in);
  std::string cfg_json(cfg_len, '\0');
  in.read(cfg_json.data(), cfg_len);
  GazeModel model;
  try {
    model.config = nlohmann::json::parse(cfg_json).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw UserError(path + ": bad config block: " + e.what());
  }
  model.config.validate();
  model.params = detail::make_parameters(model.config);
  auto refs = tensor_refs(model.params);
  const auto count = detail::read_le<std::uint32_t>(in);
  if (count != refs.size())
    throw UserError(path + ": tensor count mismatch");
  for (auto& ref : refs) {
    const auto name_len = detail::read_le<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != ref.name)
      throw UserError(path + ": unexpected tensor '" + name + "', wanted '" +
                      ref.name + "'");
    const auto ndim = detail::read_le<std::uint32_t>(in);
    const auto rows = detail::read_le<std::uint64_t>(in);
    const auto cols = detail::read_le<std::uint64_t>(in);
    if (ndim != 2 || rows != static_cast<std::uint64_t>(ref.rows) ||
        cols != static_cast<std::uint64_t>(ref.cols))
      throw UserError(path + ": shape mismatch for tensor '" + name + "'");
    in.read(reinterpret_cast<char*>(ref.data),
            static_cast<std::streamsize>(ref.size() * sizeof(double)));
  }
  if (!in) throw UserError(path + ": truncated checkpoint");
  return model;
}

}  // namespace fovealnet
