#include <catch2/catch_amalgamated.hpp>

#include "fovealnet/image.hpp"
#include "fovealnet/rng.hpp"

using namespace fovealnet;

namespace {

GrayFrame random_frame(int w, int h, std::uint64_t seed) {
  GrayFrame f(w, h);
  Rng rng(seed);
  for (auto& px : f.data)
    px = static_cast<std::uint8_t>(rng.next_u64() % 256);
  return f;
}

}  // namespace

TEST_CASE("PGM round trip preserves bytes") {
  const GrayFrame f = random_frame(37, 23, 1);
  save_pgm(f, "img_rt.pgm");
  const GrayFrame g = load_pgm("img_rt.pgm");
  CHECK(g == f);
}

TEST_CASE("PNG round trip preserves bytes") {
  const GrayFrame f = random_frame(64, 48, 2);
  save_png(f, "img_rt.png");
  const GrayFrame g = load_png("img_rt.png");
  CHECK(g == f);
}

TEST_CASE("load_image dispatches on extension") {
  const GrayFrame f = random_frame(16, 16, 3);
  save_image(f, "img_a.pgm");
  save_image(f, "img_b.png");
  CHECK(load_image("img_a.pgm") == f);
  CHECK(load_image("img_b.png") == f);
  CHECK_THROWS_AS(load_image("img_a.bmp"), UserError);
  CHECK_THROWS_AS(load_image("missing.pgm"), UserError);
}

TEST_CASE("corrupt PGM is rejected") {
  {
    std::ofstream out("img_bad.pgm", std::ios::binary);
    out << "P5\n10 10\n255\n";
    out << "short";
  }
  CHECK_THROWS_AS(load_pgm("img_bad.pgm"), UserError);
}

TEST_CASE("resize keeps constant images constant") {
  GrayFrame f(50, 30, 77);
  const GrayFrame g = resize_bilinear(f, 17, 11);
  for (auto px : g.data) CHECK(px == 77);
}

TEST_CASE("identity resize is exact") {
  const GrayFrame f = random_frame(25, 19, 4);
  CHECK(resize_bilinear(f, 25, 19) == f);
}

TEST_CASE("crop_region extracts the window") {
  const GrayFrame f = random_frame(40, 30, 5);
  const GrayFrame c = crop_region(f, 5, 7, 10, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 10; ++x) CHECK(c.at(x, y) == f.at(5 + x, 7 + y));
  CHECK_THROWS_AS(crop_region(f, 35, 0, 10, 8), UserError);
}
