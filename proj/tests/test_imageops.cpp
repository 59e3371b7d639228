#include "diffnst/error.hpp"
#include "diffnst/imageops.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diffnst;
using namespace diffnst::testing;

namespace {

// Squeezes a fixture into [lo, lo + span] so colour transfer does not clip.
torch::Tensor squeeze_range(const torch::Tensor& x, double lo, double span) { return lo + span * x; }

// Hand-rolled Sobel on luma with replicate padding.
std::vector<std::vector<double>> sobel_oracle(const torch::Tensor& image) {
  const int h = static_cast<int>(image.size(1)), w = static_cast<int>(image.size(2));
  auto image64 = image.to(torch::kFloat64);
  auto a = image64.accessor<double, 3>();
  auto luma = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return 0.299 * a[0][y][x] + 0.587 * a[1][y][x] + 0.114 * a[2][y][x];
  };
  std::vector<std::vector<double>> out(h, std::vector<double>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (luma(y - 1, x + 1) + 2 * luma(y, x + 1) + luma(y + 1, x + 1)) -
                        (luma(y - 1, x - 1) + 2 * luma(y, x - 1) + luma(y + 1, x - 1));
      const double gy = (luma(y + 1, x - 1) + 2 * luma(y + 1, x) + luma(y + 1, x + 1)) -
                        (luma(y - 1, x - 1) + 2 * luma(y - 1, x) + luma(y - 1, x + 1));
      out[y][x] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("imageops") {
  TEST_CASE("single-channel two-pixel closed form") {
    auto content = torch::tensor({0.2f, 0.4f}).view({1, 1, 2});
    auto style = torch::tensor({0.4f, 0.8f}).view({1, 1, 2});
    auto out = match_colors(content, style);
    CHECK(std::abs(out[0][0][0].item<double>() - 0.4) < 1e-6);
    CHECK(std::abs(out[0][0][1].item<double>() - 0.8) < 1e-6);
  }

  TEST_CASE("matching an image to itself is the identity") {
    auto x = style_fixture(11);
    CHECK(max_abs_diff(match_colors(x, x), x) < 1e-5);
  }

  TEST_CASE("constant content takes the style mean") {
    auto content = torch::full({3, 16, 16}, 0.3f);
    auto style = style_fixture(4, 16);
    auto out = match_colors(content, style);
    auto mean = style.mean({1, 2});
    for (int c = 0; c < 3; ++c) {
      CHECK(max_abs_diff(out[c], torch::full({16, 16}, mean[c].item<float>())) < 1e-5);
    }
  }

  TEST_CASE("output moments match the style on non-clipping fixtures") {
    for (uint64_t seed : {1, 2, 3}) {
      auto content = squeeze_range(content_fixture(seed), 0.3, 0.4);
      auto style = squeeze_range(style_fixture(seed + 10), 0.35, 0.3);
      auto raw = match_colors(content, style, /*clamp=*/false);
      REQUIRE(raw.min().item<float>() >= 0.0f);
      REQUIRE(raw.max().item<float>() <= 1.0f);
      auto got = color_stats(raw), want = color_stats(style);
      CHECK(max_abs_diff(got.mean, want.mean) < 1e-3);
      CHECK(max_abs_diff(got.covariance, want.covariance) < 1e-3);

      auto twice = match_colors(raw, style, false);
      CHECK(max_abs_diff(twice, raw) < 1e-4);
    }
  }

  TEST_CASE("covariance is symmetric and positive semidefinite") {
    auto stats = color_stats(content_fixture(5));
    CHECK(max_abs_diff(stats.covariance, stats.covariance.t()) == 0.0);
    CHECK(torch::linalg_eigvalsh(stats.covariance).min().item<double>() >= -1e-8);
  }

  TEST_CASE("non-finite inputs are rejected") {
    auto bad = content_fixture(1, 16);
    bad[0][0][0] = std::nanf("");
    CHECK_THROWS_AS(match_colors(bad, style_fixture(2, 16)), ConfigError);
    CHECK_THROWS_AS(match_colors(style_fixture(2, 16), bad), ConfigError);
  }

  TEST_CASE("sobel is zero on constant images") {
    auto m = sobel_map(torch::full({3, 12, 12}, 0.7f));
    CHECK(m.sizes() == torch::IntArrayRef{12, 12});
    CHECK(m.abs().max().item<float>() <= 1e-6f);
  }

  TEST_CASE("vertical step edge gives 4 * delta next to the edge") {
    auto img = torch::zeros({3, 4, 4});
    img.narrow(2, 2, 2).fill_(1.0f);
    auto m = sobel_map(img);
    auto oracle = sobel_oracle(img);
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) CHECK(std::abs(m[y][x].item<double>() - oracle[y][x]) < 1e-5);
    }
    CHECK(std::abs(m[1][1].item<double>() - 4.0) < 1e-5);
    CHECK(std::abs(m[1][2].item<double>() - 4.0) < 1e-5);
    CHECK(m[1][0].item<float>() <= 1e-6f);
  }

  TEST_CASE("sobel matches the hand oracle on a textured image") {
    auto img = style_fixture(3, 16);
    auto m = sobel_map(img);
    auto oracle = sobel_oracle(img);
    double worst = 0.0;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) worst = std::max(worst, std::abs(m[y][x].item<double>() - oracle[y][x]));
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("sobel is translation-equivariant in the interior") {
    auto img = style_fixture(8, 32);
    auto shifted = img.roll({2, 3}, {1, 2});
    auto a = sobel_map(img).roll({2, 3}, {0, 1});
    auto b = sobel_map(shifted);
    // Away from the wrapped seam and the replicate-padded border.
    auto inner = [](const torch::Tensor& t) { return t.narrow(0, 4, 26).narrow(1, 5, 25); };
    CHECK(max_abs_diff(inner(a), inner(b)) < 1e-5);
  }

  TEST_CASE("complex crops come from the textured half") {
    auto img = torch::full({3, 64, 64}, 0.5f);
    img.narrow(2, 32, 32).copy_(style_fixture(9, 64).narrow(2, 32, 32));
    auto sm = sobel_map(img);
    for (uint64_t seed : {1, 2, 3, 4}) {
      for (const auto& win : select_crops(sm, 8, 16, CropBin::kComplex, seed)) CHECK(win.left + 8 >= 32);
      for (const auto& win : select_crops(sm, 8, 16, CropBin::kSimple, seed)) CHECK(win.left + 8 < 32);
    }
  }

  TEST_CASE("simple-bin scores never exceed complex-bin scores") {
    for (uint64_t seed : {1, 5, 9}) {
      auto sm = sobel_map(content_fixture(seed));
      auto simple = select_crops(sm, 16, 16, CropBin::kSimple, seed);
      auto complex = select_crops(sm, 16, 16, CropBin::kComplex, seed);
      double max_simple = 0.0, min_complex = 1e9;
      for (const auto& w : simple) max_simple = std::max(max_simple, w.score);
      for (const auto& w : complex) min_complex = std::min(min_complex, w.score);
      CHECK(max_simple <= min_complex);
    }
  }

  TEST_CASE("constant images yield valid crops in both bins") {
    auto img = torch::full({3, 32, 32}, 0.2f);
    auto sm = sobel_map(img);
    for (auto bin : {CropBin::kSimple, CropBin::kComplex}) {
      auto crops = sample_crops(img, sm, 3, 8, bin, 4);
      REQUIRE(crops.size() == 3);
      for (const auto& c : crops) CHECK(c.sizes() == torch::IntArrayRef{3, 8, 8});
    }
  }

  TEST_CASE("crop sampling is deterministic per seed") {
    auto img = content_fixture(2);
    auto sm = sobel_map(img);
    auto a = sample_crops(img, sm, 1, 16, CropBin::kComplex, 42);
    auto b = sample_crops(img, sm, 1, 16, CropBin::kComplex, 42);
    CHECK(torch::equal(a[0], b[0]));
  }

  TEST_CASE("crops larger than the image are rejected") {
    auto img = content_fixture(2, 16);
    CHECK_THROWS_AS(sample_crops(img, sobel_map(img), 1, 32, CropBin::kSimple, 1), ConfigError);
    CHECK_THROWS_AS(sample_crops(img, sobel_map(img), 0, 8, CropBin::kSimple, 1), ConfigError);
  }
}
