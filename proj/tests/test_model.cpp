#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fovealnet/model.hpp"
#include "fovealnet/rng.hpp"
#include "support/grad_check.hpp"
#include "support/naive_vit.hpp"

using namespace fovealnet;

namespace {

ModelConfig toy_config(double prune_ratio = 0.0, int prune_after = 1) {
  ModelConfig cfg;
  cfg.image_side = 32;
  cfg.patch_side = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.embed_dim = 16;
  cfg.mlp_ratio = 4;
  cfg.prune_ratio = prune_ratio;
  cfg.prune_after_block = prune_after;
  cfg.exit_blocks = {1, 2};
  return cfg;
}

ModelConfig paper_config() {
  ModelConfig cfg;
  cfg.image_side = 224;
  cfg.patch_side = 16;
  cfg.depth = 8;
  cfg.heads = 6;
  cfg.embed_dim = 384;
  cfg.mlp_ratio = 4;
  cfg.exit_blocks = {3, 4, 5, 6, 7, 8};
  return cfg;
}

}  // namespace

TEST_CASE("token counts follow the patch grid") {
  {
    const GazeModel m = GazeModel::init(paper_config(), 1);
    FloatImage img(224, 224, 0.1);
    const TokenSet tokens = patchify(m, img);
    CHECK(tokens.latents.rows() == 197);  // 196 patches + summary
  }
  {
    const GazeModel m = GazeModel::init(toy_config(), 1);
    FloatImage img(32, 32, 0.1);
    CHECK(patchify(m, img).latents.rows() == 17);
    FloatImage wrong(30, 30, 0.1);
    CHECK_THROWS_AS(patchify(m, wrong), UserError);
  }
  ModelConfig bad = toy_config();
  bad.image_side = 30;
  CHECK_THROWS_AS(bad.validate(), UserError);
}

TEST_CASE("forward emits one prediction per configured exit") {
  const GazeModel m = GazeModel::init(toy_config(), 2);
  Rng rng(7);
  const auto img = gradcheck::random_image(32, rng);
  const GazePrediction pred = forward(m, img);
  CHECK(pred.by_exit.size() == 2);
  CHECK(pred.by_exit.count(1) == 1);
  CHECK(pred.by_exit.count(2) == 1);
}

TEST_CASE("prune placement is irrelevant when pruning is disabled") {
  ModelConfig a = toy_config(0.0, 1);
  ModelConfig b = toy_config(0.0, 2);
  const GazeModel ma = GazeModel::init(a, 3);
  const GazeModel mb = GazeModel::init(b, 3);  // same shapes, same draws
  Rng rng(8);
  const auto img = gradcheck::random_image(32, rng);
  const auto pa = forward(ma, img);
  const auto pb = forward(mb, img);
  CHECK(pa.by_exit.at(2) == pb.by_exit.at(2));
}

TEST_CASE("forward agrees with the naive straight-line oracle") {
  Rng rng(9);
  for (double ratio : {0.0, 0.25}) {
    const GazeModel m = GazeModel::init(toy_config(ratio, 1), 11);
    for (int trial = 0; trial < 5; ++trial) {
      const auto img = gradcheck::random_image(32, rng);
      const GazePrediction pred = forward(m, img);
      const auto want = naive::forward(m, img, 2);
      REQUIRE(want.size() == pred.by_exit.size());
      for (const auto& [l, p] : want) {
        CHECK(pred.by_exit.at(l)(0) == Catch::Approx(p.first).margin(1e-10));
        CHECK(pred.by_exit.at(l)(1) == Catch::Approx(p.second).margin(1e-10));
      }
    }
  }
}

TEST_CASE("prune_tokens keeps top scores with index tie-break") {
  TokenSet tokens;
  tokens.latents = Mat::Zero(5, 4);
  for (int i = 0; i < 5; ++i) tokens.latents(i, 0) = i;
  tokens.patch_index = {-1, 0, 1, 2, 3};
  const std::vector<double> scores = {0.5, 0.1, 0.3, 0.1};
  const TokenSet pruned = prune_tokens(tokens, scores, 0.75);
  REQUIRE(pruned.latents.rows() == 4);  // summary + ceil(0.75*4)=3
  CHECK(pruned.patch_index == std::vector<int>{-1, 0, 1, 2});
  // Row payloads follow the original rows.
  CHECK(pruned.latents(1, 0) == 1.0);
  CHECK(pruned.latents(2, 0) == 2.0);
  CHECK(pruned.latents(3, 0) == 3.0);
}

TEST_CASE("prune_tokens with keep_ratio one is the identity") {
  Rng rng(12);
  TokenSet tokens;
  tokens.latents = Mat::Random(9, 6);
  tokens.patch_index = {-1, 0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<double> scores(8);
  for (auto& s : scores) s = rng.uniform();
  const TokenSet pruned = prune_tokens(tokens, scores, 1.0);
  CHECK(pruned.latents == tokens.latents);
  CHECK(pruned.patch_index == tokens.patch_index);
}

TEST_CASE("prune_tokens matches a full-sort oracle on random scores") {
  Rng rng(13);
  for (int trial = 0; trial < 500; ++trial) {
    const int n_patches = 3 + static_cast<int>(rng.next_u64() % 30);
    TokenSet tokens;
    tokens.latents = Mat::Zero(n_patches + 1, 2);
    tokens.patch_index.resize(n_patches + 1);
    tokens.patch_index[0] = -1;
    for (int i = 0; i < n_patches; ++i) tokens.patch_index[i + 1] = i;
    std::vector<double> scores(n_patches);
    for (auto& s : scores)
      s = (rng.next_u64() % 8) / 8.0;  // coarse values force ties
    const double keep_ratio = 0.1 + 0.9 * rng.uniform();

    const TokenSet pruned = prune_tokens(tokens, scores, keep_ratio);

    // Oracle: full sort of (score desc, index asc) pairs.
    std::vector<std::pair<double, int>> ranked;
    for (int i = 0; i < n_patches; ++i) ranked.push_back({-scores[i], i});
    std::sort(ranked.begin(), ranked.end());
    const long keep = static_cast<long>(std::ceil(keep_ratio * n_patches));
    std::vector<int> want;
    for (long i = 0; i < keep; ++i) want.push_back(ranked[i].second);
    std::sort(want.begin(), want.end());

    std::vector<int> got(pruned.patch_index.begin() + 1,
                         pruned.patch_index.end());
    CHECK(got == want);
    CHECK(pruned.patch_index[0] == -1);  // summary survives
  }
}

TEST_CASE("summary token survives aggressive pruning end to end") {
  const GazeModel m = GazeModel::init(toy_config(0.9, 1), 21);
  Rng rng(22);
  const auto img = gradcheck::random_image(32, rng);
  const GazePrediction pred = forward(m, img);  // 2 tokens after pruning
  CHECK(pred.by_exit.size() == 2);
  CHECK(std::isfinite(pred.by_exit.at(2)(0)));
}

TEST_CASE("attention rows are probability distributions") {
  const GazeModel m = GazeModel::init(toy_config(), 31);
  Rng rng(32);
  const auto img = gradcheck::random_image(32, rng);
  ForwardTrace trace;
  forward(m, img, trace);
  for (const auto& block : trace.blocks)
    for (const auto& head : block.attn)
      for (long r = 0; r < head.rows(); ++r)
        CHECK(head.row(r).sum() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("zero loss gradient produces zero parameter gradients") {
  const GazeModel m = GazeModel::init(toy_config(0.25, 1), 41);
  Rng rng(42);
  const auto img = gradcheck::random_image(32, rng);
  ForwardTrace trace;
  forward(m, img, trace);
  const Parameters grads =
      backward(m, trace, {{2, Eigen::Vector2d::Zero()}});
  for (const auto& ref : tensor_refs(grads))
    for (long i = 0; i < ref.size(); ++i) CHECK(ref.data[i] == 0.0);
}

TEST_CASE("exit heads outside the loss receive zero gradient") {
  const GazeModel m = GazeModel::init(toy_config(), 43);
  Rng rng(44);
  const auto img = gradcheck::random_image(32, rng);
  ForwardTrace trace;
  forward(m, img, trace);
  const Parameters grads =
      backward(m, trace, {{2, Eigen::Vector2d(0.3, -0.2)}});
  for (const auto& ref : tensor_refs(grads)) {
    if (ref.name.rfind("exit1.", 0) == 0)
      for (long i = 0; i < ref.size(); ++i) CHECK(ref.data[i] == 0.0);
    if (ref.name.rfind("exit2.w2", 0) == 0) {
      double sum = 0;
      for (long i = 0; i < ref.size(); ++i) sum += std::abs(ref.data[i]);
      CHECK(sum > 0.0);
    }
  }
}

TEST_CASE("parameter gradients match central finite differences") {
  // Through the latency-composed objective, pruning active.
  GazeModel m = GazeModel::init(toy_config(0.25, 1), 51);
  Rng rng(52);
  const auto batch = gradcheck::random_batch(32, 3, rng);
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}, {25, 11.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  cfg.n_scale = 50.0;
  const auto report = gradcheck::compare_fd(m, batch, cfg, 1e-5, 1e-4);
  INFO("worst " << report.worst_name << " rel " << report.worst_rel);
  CHECK(report.checked > 8000);
  CHECK(report.failed == 0);
}

TEST_CASE("truncate reproduces the full model exits bit for bit") {
  const GazeModel m = GazeModel::init(toy_config(0.25, 1), 61);
  Rng rng(62);
  for (int trial = 0; trial < 4; ++trial) {
    const auto img = gradcheck::random_image(32, rng);
    const GazePrediction full = forward(m, img);
    for (int l : m.config.exit_blocks) {
      const Eigen::Vector2d view = truncate(m, l).predict(img);
      CHECK(view(0) == full.by_exit.at(l)(0));
      CHECK(view(1) == full.by_exit.at(l)(1));
    }
  }
  CHECK_THROWS_AS(truncate(m, 3), UserError);
}

TEST_CASE("truncated views use strictly fewer parameters") {
  ModelConfig cfg = toy_config();
  cfg.depth = 4;
  cfg.exit_blocks = {1, 2, 3, 4};
  const GazeModel m = GazeModel::init(cfg, 63);
  for (int l = 1; l <= 4; ++l)
    CHECK(truncate(m, l).parameter_count() < m.parameter_count());
  CHECK(truncate(m, 1).parameter_count() <
        truncate(m, 3).parameter_count());
}

TEST_CASE("flops match a hand count on a one-block toy") {
  ModelConfig cfg;
  cfg.image_side = 16;
  cfg.patch_side = 8;  // 4 patches + summary = 5 tokens
  cfg.depth = 1;
  cfg.heads = 1;
  cfg.embed_dim = 4;
  cfg.mlp_ratio = 4;
  cfg.exit_blocks = {1};
  // Hand count: embed 4*64*4 = 1024; qkv+proj 4*5*16 = 320;
  // attention 2*25*4 = 200; mlp 2*4*5*16 = 640; head 4*2 + 2*2 = 12.
  CHECK(flops_estimate(cfg, 1) == 1024ULL + 320 + 200 + 640 + 12);
}

TEST_CASE("depth-3 over depth-8 compute ratio lands near 0.379") {
  const ModelConfig cfg = paper_config();
  const double ratio = static_cast<double>(flops_estimate(cfg, 3)) /
                       static_cast<double>(flops_estimate(cfg, 8));
  CHECK(ratio == Catch::Approx(0.379).margin(0.03));
}

TEST_CASE("flops grow with depth and shrink with pruning") {
  const ModelConfig cfg = paper_config();
  for (int l = 1; l < 8; ++l)
    CHECK(flops_estimate(cfg, l) < flops_estimate(cfg, l + 1));
  std::uint64_t previous = std::numeric_limits<std::uint64_t>::max();
  for (double r : {0.0, 0.1, 0.2, 0.4}) {
    ModelConfig pruned = cfg;
    pruned.prune_ratio = r;
    pruned.prune_after_block = 2;
    const std::uint64_t flops = flops_estimate(pruned, 8);
    CHECK((flops < previous || r == 0.0));
    previous = flops;
  }
}

TEST_CASE("checkpoints round trip exactly") {
  const GazeModel m = GazeModel::init(toy_config(0.2, 1), 71);
  save_checkpoint(m, "model_rt.bin");
  const GazeModel n = load_checkpoint("model_rt.bin");
  CHECK(n.config.depth == m.config.depth);
  CHECK(n.config.prune_ratio == m.config.prune_ratio);
  auto a = tensor_refs(m.params);
  auto b = tensor_refs(n.params);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    REQUIRE(a[k].size() == b[k].size());
    for (long i = 0; i < a[k].size(); ++i)
      CHECK(a[k].data[i] == b[k].data[i]);
  }
  Rng rng(72);
  const auto img = gradcheck::random_image(32, rng);
  const auto pa = forward(m, img);
  const auto pb = forward(n, img);
  CHECK(pa.by_exit.at(2) == pb.by_exit.at(2));

  CHECK_THROWS_AS(load_checkpoint("missing.bin"), UserError);
  {
    std::ofstream junk("junk.bin", std::ios::binary);
    junk << "NOTACKPT" << std::string(64, 'x');
  }
  CHECK_THROWS_AS(load_checkpoint("junk.bin"), UserError);
}

TEST_CASE("non-finite activations report the offending block") {
  GazeModel m = GazeModel::init(toy_config(), 81);
  m.params.blocks[1].w1(0, 0) = std::numeric_limits<double>::infinity();
  Rng rng(82);
  const auto img = gradcheck::random_image(32, rng);
  ForwardTrace trace;
  try {
    forward(m, img, trace);
    FAIL("expected a non-finite report");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("block 2") != std::string::npos);
  }
}
