#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fovealnet/loss.hpp"
#include "fovealnet/rng.hpp"

using namespace fovealnet;

TEST_CASE("mse_loss is the batch mean") {
  CHECK(mse_loss({0.04}).value == Catch::Approx(0.04));
  CHECK(mse_loss({0.0, 0.0}).value == 0.0);
  CHECK(mse_loss({0.01, 0.03}).value == Catch::Approx(0.02));
  CHECK_THROWS_AS(mse_loss({}), UserError);
}

TEST_CASE("smooth_max of a singleton is exact") {
  for (double x : {0.0, 0.013, 0.4, 2.0}) {
    CHECK(smooth_max({x}, 100.0).value == x);
    CHECK(smooth_max({x}, 10.0).value == x);
  }
}

TEST_CASE("smooth_max matches naive log-sum-exp at benign magnitudes") {
  // Independent route: the unshifted definition, safe here because N*x stays
  // small.
  const BatchErrors batch = {0.01, 0.04};
  const double naive =
      std::log(std::exp(100.0 * 0.01) + std::exp(100.0 * 0.04)) / 100.0;
  CHECK(smooth_max(batch, 100.0).value == Catch::Approx(naive).epsilon(1e-12));
  // Frozen from the oracle: 0.04 + ln(1 + e^-3)/100.
  CHECK(smooth_max(batch, 100.0).value ==
        Catch::Approx(0.0404858735).margin(1e-9));
}

TEST_CASE("smooth_max never overflows in shifted form") {
  const BatchErrors batch = {400.0, 900.0, 10.0};
  const auto lse = smooth_max(batch, 200.0);
  CHECK(std::isfinite(lse.value));
  CHECK(lse.value >= 900.0);
  CHECK(lse.value <= 900.0 + std::log(3.0) / 200.0);
}

TEST_CASE("smooth_max obeys the sandwich bound") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t size = 1 + rng.next_u64() % 64;
    BatchErrors batch(size);
    for (auto& x : batch) x = rng.uniform(0.0, 0.3);
    const double mx = *std::max_element(batch.begin(), batch.end());
    for (double n : {10.0, 50.0, 100.0}) {
      const double v = smooth_max(batch, n).value;
      CHECK(v >= mx);
      CHECK(v <= mx + std::log(static_cast<double>(size)) / n + 1e-12);
    }
  }
}

TEST_CASE("smooth_max is permutation-invariant and monotone") {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    BatchErrors batch(8);
    for (auto& x : batch) x = rng.uniform(0.0, 0.2);
    BatchErrors reversed(batch.rbegin(), batch.rend());
    CHECK(smooth_max(batch, 50.0).value ==
          Catch::Approx(smooth_max(reversed, 50.0).value).epsilon(1e-12));
    BatchErrors bumped = batch;
    bumped[trial % 8] += 0.01;
    CHECK(smooth_max(bumped, 50.0).value > smooth_max(batch, 50.0).value);
  }
}

TEST_CASE("smooth_max gradient equals the softmax weighting") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    BatchErrors batch(6);
    for (auto& x : batch) x = rng.uniform(0.0, 0.25);
    const auto lse = smooth_max(batch, 100.0);
    double weight_sum = 0;
    for (double w : lse.grad) weight_sum += w;
    CHECK(weight_sum == Catch::Approx(1.0).epsilon(1e-12));
    // Central finite differences on each coordinate. Weights below the FD
    // resolution (the loss change drowns in rounding) get an absolute floor.
    const double h = 1e-7;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      BatchErrors up = batch, dn = batch;
      up[i] += h;
      dn[i] -= h;
      const double fd =
          (smooth_max(up, 100.0).value - smooth_max(dn, 100.0).value) /
          (2.0 * h);
      CHECK(std::abs(lse.grad[i] - fd) <=
            1e-6 * std::max(std::abs(lse.grad[i]), std::abs(fd)) + 1e-9);
    }
  }
}

TEST_CASE("performance_aware_loss on a zero-error sample hits the floor") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  cfg.theta_i_deg = 5.0;
  // The singleton zero batch pins smooth_max exactly at zero, so U collapses
  // to the latency at theta_i. Larger all-zero batches carry the ln(B)/N
  // log-sum-exp offset and sit slightly above the floor.
  const auto loss = performance_aware_loss({0.0}, cfg);
  CHECK(loss.value == Catch::Approx(4.0).epsilon(1e-12));
  for (double g : loss.grad) CHECK(g == 0.0);

  const auto trio = performance_aware_loss({0.0, 0.0, 0.0}, cfg);
  CHECK(trio.value >= 4.0);
  CHECK(trio.value <=
        eval_latency(profile, 5.0 + rad2deg(std::sqrt(std::log(3.0) / 100.0))) +
            1e-12);
}

TEST_CASE("performance_aware_loss maps a 5-degree error to the curve") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  cfg.theta_i_deg = 5.0;
  // One-sample batch pins smooth_max exactly at (5 deg in radians)^2.
  const double x = deg2rad(5.0) * deg2rad(5.0);
  const auto loss = performance_aware_loss({x}, cfg);
  CHECK(loss.value == Catch::Approx(4.0 + 5.0 * 4.0 / 15.0).epsilon(1e-9));
  CHECK(loss.value == Catch::Approx(5.333).margin(1e-3));
}

TEST_CASE("performance_aware_loss never decreases when adding an outlier") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}, {25, 11.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    BatchErrors batch(10);
    for (auto& v : batch) v = rng.uniform(0.0, 0.02);
    const double base = performance_aware_loss(batch, cfg).value;
    BatchErrors with_outlier = batch;
    with_outlier.push_back(*std::max_element(batch.begin(), batch.end()) +
                           rng.uniform(0.0, 0.05));
    CHECK(performance_aware_loss(with_outlier, cfg).value >= base - 1e-12);
  }
}

TEST_CASE("performance_aware_loss gradient matches finite differences") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}, {25, 11.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  cfg.n_scale = 100.0;
  Rng rng(33);
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    BatchErrors batch(5);
    for (auto& v : batch) v = rng.uniform(1e-4, 0.05);
    // Keep clear of the profile knots where U is non-differentiable.
    const double s = smooth_max(batch, cfg.n_scale).value;
    const double theta = cfg.theta_i_deg + rad2deg(std::sqrt(s));
    if (std::abs(theta - 20.0) < 0.2 || std::abs(theta - 25.0) < 0.2) continue;
    const auto loss = performance_aware_loss(batch, cfg);
    const double h = 1e-8;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      BatchErrors up = batch, dn = batch;
      up[i] += h;
      dn[i] -= h;
      const double fd = (performance_aware_loss(up, cfg).value -
                         performance_aware_loss(dn, cfg).value) /
                        (2.0 * h);
      if (std::abs(fd) < 1e-12) continue;
      CHECK(loss.grad[i] == Catch::Approx(fd).epsilon(1e-4));
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("multires_loss with one exit equals the single loss") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  const BatchErrors batch = {0.01, 0.002, 0.03};
  const auto single = performance_aware_loss(batch, cfg);
  const auto multi = multires_loss({{8, batch}}, cfg);
  CHECK(multi.value == Catch::Approx(single.value).epsilon(1e-12));
  for (std::size_t i = 0; i < batch.size(); ++i)
    CHECK(multi.grad.at(8)[i] == Catch::Approx(single.grad[i]).epsilon(1e-12));
}

TEST_CASE("multires_loss doubles with two identical exits") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  const BatchErrors batch = {0.01, 0.002, 0.03};
  const auto single = performance_aware_loss(batch, cfg);
  const auto multi = multires_loss({{7, batch}, {8, batch}}, cfg);
  CHECK(multi.value == Catch::Approx(2.0 * single.value).epsilon(1e-12));
}

TEST_CASE("multires_loss sums six independent exit evaluations") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}, {25, 11.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  Rng rng(35);
  std::map<int, BatchErrors> batches;
  double expected = 0;
  for (int l = 3; l <= 8; ++l) {
    BatchErrors b(6);
    for (auto& v : b) v = rng.uniform(0.0, 0.04);
    expected += performance_aware_loss(b, cfg).value;
    batches[l] = std::move(b);
  }
  CHECK(multires_loss(batches, cfg).value ==
        Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("multires_loss respects exit weights and flags missing exits") {
  const auto profile = fit_profile({{5, 4.0}, {20, 8.0}});
  LossConfig cfg;
  cfg.profile = &profile;
  cfg.exit_weights = {{4, 2.0}, {8, 1.0}};
  const BatchErrors batch = {0.01, 0.02};
  const auto single = performance_aware_loss(batch, cfg);
  const auto multi = multires_loss({{4, batch}, {8, batch}}, cfg);
  CHECK(multi.value == Catch::Approx(3.0 * single.value).epsilon(1e-12));
  CHECK_THROWS_AS(multires_loss({{8, batch}}, cfg), UserError);
}

TEST_CASE("worst-sample gradient weight grows with N") {
  const BatchErrors batch = {0.010, 0.018, 0.027, 0.031, 0.006};
  const std::size_t worst = 3;
  double previous = 0.0;
  for (double n : {10.0, 50.0, 100.0}) {
    const auto lse = smooth_max(batch, n);
    CHECK(lse.grad[worst] > previous);
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (i != worst) CHECK(lse.grad[worst] > lse.grad[i]);
    previous = lse.grad[worst];
  }
}
