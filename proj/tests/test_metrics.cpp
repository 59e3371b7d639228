#include <cmath>
#include <fstream>

#include "diffnst/error.hpp"
#include "diffnst/image_io.hpp"
#include "diffnst/metrics.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diffnst;
using namespace diffnst::testing;

namespace {

// Single 1-channel layer: the red channel.
class RedChannel final : public FeatureExtractor {
 public:
  std::vector<torch::Tensor> features(const torch::Tensor& images) const override {
    return {images.narrow(1, 0, 1)};
  }
  int perceptual_layer() const override { return 0; }
  std::string id() const override { return "red"; }
};

// Red channel split between mu - sigma and mu + sigma: population moments (mu, sigma).
torch::Tensor two_point_image(double mu, double sigma) {
  auto img = torch::zeros({3, 8, 8}, torch::kFloat64);
  img[0].narrow(0, 0, 4).fill_(mu - sigma);
  img[0].narrow(0, 4, 4).fill_(mu + sigma);
  return img;
}

torch::Tensor solid(double r, double g, double b, int size = 8) {
  return torch::tensor({r, g, b}, torch::kFloat32).view({3, 1, 1}).expand({3, size, size}).contiguous();
}

torch::Tensor permute_pixels(const torch::Tensor& img, uint64_t seed) {
  auto flat = img.reshape({img.size(0), -1});
  auto perm = torch::randperm(flat.size(1), make_generator(seed), torch::kLong);
  return flat.index_select(1, perm).reshape(img.sizes());
}

void write_triple(const std::filesystem::path& dir, const torch::Tensor& content, const torch::Tensor& style,
                  const torch::Tensor& stylized) {
  std::filesystem::create_directories(dir);
  write_png(dir / "content.png", content);
  write_png(dir / "style.png", style);
  write_png(dir / "stylized.png", stylized);
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("sifid matches the scalar Gaussian closed form") {
    RedChannel ex;
    const std::vector<std::array<double, 4>> cases{{0.5, 0.1, 0.3, 0.2}, {0.2, 0.05, 0.7, 0.25}, {0.4, 0.0, 0.4, 0.3}};
    for (const auto& [m1, s1, m2, s2] : cases) {
      const double expected = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
      CHECK(std::abs(sifid(ex, two_point_image(m1, s1), two_point_image(m2, s2), 0) - expected) < 1e-6);
    }
  }

  TEST_CASE("sifid is zero at identity, symmetric and non-negative") {
    auto ex = default_extractor();
    auto a = content_fixture(11), b = style_fixture(12);
    CHECK(sifid(*ex, a, a, 1) < 1e-6);
    const double ab = sifid(*ex, a, b, 1), ba = sifid(*ex, b, a, 1);
    CHECK(ab > 0.0);
    CHECK(std::abs(ab - ba) < 1e-6 * std::max(1.0, ab));
    CHECK_THROWS_AS(sifid(*ex, a, b, 9), ConfigError);
  }

  TEST_CASE("chamfer closed forms") {
    auto red = solid(1, 0, 0), blue = solid(0, 0, 1);
    CHECK(std::abs(chamfer_color(red, blue, 64) - std::sqrt(2.0)) < 1e-6);
    auto img = content_fixture(5, 16);
    CHECK(chamfer_color(img, img, 256) < 1e-12);
    auto other = style_fixture(6, 16);
    const double d = chamfer_color(img, other, 256);
    CHECK(std::abs(chamfer_color(permute_pixels(img, 1), other, 256) - d) < 1e-9);
    CHECK(std::abs(chamfer_color(img, permute_pixels(other, 2), 256) - d) < 1e-9);
    CHECK(std::abs(chamfer_color(other, img, 256) - d) < 1e-9);
    // sampled mode is seed-deterministic
    CHECK(chamfer_color(img, other, 50, 3) == chamfer_color(img, other, 50, 3));
    CHECK(chamfer_color(img, other, 50, 3) >= 0.0);
    CHECK_THROWS_AS(chamfer_color(img, other, 0), ConfigError);
  }

  TEST_CASE("perceptual distance with the identity extractor on 2x2 images") {
    IdentityExtractor ex;
    auto a = solid(1, 0, 0, 2);
    auto b = torch::zeros({3, 2, 2});
    b[0][0][0] = 1;                  // same direction: 0
    b[1][0][1] = 1;                  // orthogonal: sqrt 2
    b[0][1][0] = 1, b[1][1][0] = 1;  // 45 degrees: sqrt(2 - sqrt 2)
    b[2][1][1] = 1;                  // orthogonal: sqrt 2
    const double expected = (0.0 + std::sqrt(2.0) + std::sqrt(2.0 - std::sqrt(2.0)) + std::sqrt(2.0)) / 4.0;
    CHECK(std::abs(perceptual_distance(ex, a, b) - expected) < 1e-6);
    CHECK(std::abs(perceptual_distance(ex, b, a) - expected) < 1e-6);
    CHECK(perceptual_distance(ex, b, b) < 1e-12);

    auto deep = default_extractor();
    auto c = content_fixture(3), d = style_fixture(4);
    CHECK(perceptual_distance(*deep, c, c) < 1e-6);
    CHECK(std::abs(perceptual_distance(*deep, c, d) - perceptual_distance(*deep, d, c)) < 1e-6);
    CHECK(perceptual_distance(*deep, c, d) > 0.0);
  }

  TEST_CASE("evaluate_corpus on an empty directory") {
    TempDir tmp("metrics_empty");
    auto report = evaluate_corpus(tmp.path);
    CHECK(report.pairs.empty());
    CHECK(report.skipped == 0);
    CHECK(report.to_json()["count"] == 0);
    CHECK_THROWS_AS(evaluate_corpus(tmp.path / "missing"), IoError);
  }

  TEST_CASE("identical triple scores zero everywhere") {
    TempDir tmp("metrics_same");
    auto img = content_fixture(8);
    write_triple(tmp.path / "a__a", img, img, img);
    auto report = evaluate_corpus(tmp.path);
    REQUIRE(report.pairs.size() == 1);
    CHECK(report.pairs[0].sifid < 1e-6);
    CHECK(report.pairs[0].chamfer < 1e-12);
    CHECK(report.pairs[0].perceptual < 1e-6);
    CHECK(report.pairs[0].content == "a");
  }

  TEST_CASE("corpus means are the arithmetic pair means and incomplete triples are skipped") {
    TempDir tmp("metrics_two");
    write_triple(tmp.path / "c1__s1", content_fixture(1), style_fixture(2), style_fixture(3));
    write_triple(tmp.path / "c2__s2", content_fixture(4), style_fixture(5), content_fixture(6));
    std::filesystem::create_directories(tmp.path / "c3__s3");
    write_png(tmp.path / "c3__s3" / "stylized.png", content_fixture(7));

    auto report = evaluate_corpus(tmp.path);
    REQUIRE(report.pairs.size() == 2);
    CHECK(report.skipped == 1);
    const auto& p = report.pairs;
    CHECK(std::abs(report.mean_sifid - (p[0].sifid + p[1].sifid) / 2.0) < 1e-9);
    CHECK(std::abs(report.mean_chamfer - (p[0].chamfer + p[1].chamfer) / 2.0) < 1e-9);
    CHECK(std::abs(report.mean_perceptual - (p[0].perceptual + p[1].perceptual) / 2.0) < 1e-9);
    for (const auto& m : p) {
      CHECK(m.sifid >= 0.0);
      CHECK(m.chamfer >= 0.0);
      CHECK(m.perceptual >= 0.0);
    }

    // pair values are recomputable from the files
    auto stylized = read_png(tmp.path / "c1__s1" / "stylized.png");
    auto style = read_png(tmp.path / "c1__s1" / "style.png");
    CHECK(std::abs(p[0].sifid - sifid(*default_extractor(), stylized, style, 1)) < 1e-9);

    const auto path = tmp.path / "report.json";
    report.save(path);
    std::ifstream in(path);
    auto j = nlohmann::json::parse(in);
    CHECK(j["pairs"].size() == 2);
    CHECK(j.contains("means"));
    CHECK(j.contains("config"));
    CHECK(evaluate_corpus(tmp.path).to_json() == report.to_json());
  }

  TEST_CASE("meta.json paths stand in for missing copies") {
    TempDir tmp("metrics_meta");
    auto content = content_fixture(2), style = style_fixture(3);
    write_png(tmp.path / "c.png", content);
    write_png(tmp.path / "s.png", style);
    const auto dir = tmp.path / "out" / "c__s";
    std::filesystem::create_directories(dir);
    write_png(dir / "stylized.png", style);
    std::ofstream(dir / "meta.json") << nlohmann::json{{"content", (tmp.path / "c.png").string()},
                                                        {"style", (tmp.path / "s.png").string()}}
                                            .dump();
    auto report = evaluate_corpus(tmp.path / "out");
    REQUIRE(report.pairs.size() == 1);
    CHECK(report.pairs[0].chamfer < 1e-12);
  }
}
