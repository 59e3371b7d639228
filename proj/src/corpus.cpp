#include "diffnst/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "diffnst/image_io.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

namespace {

using torch::Tensor;

struct Grid {
  Tensor x, y;  // [H, W] in [0, 1]
};

Grid make_grid(int size) {
  auto coords = (torch::arange(size, torch::kFloat32) + 0.5) / size;
  auto mesh = torch::meshgrid({coords, coords}, "ij");
  return {mesh[1], mesh[0]};
}

Tensor color(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return torch::tensor({static_cast<float>(u(rng)), static_cast<float>(u(rng)), static_cast<float>(u(rng))})
      .view({3, 1, 1});
}

Tensor blend(const Tensor& base, const Tensor& paint, const Tensor& mask) {
  auto m = mask.unsqueeze(0);
  return base * (1 - m) + paint * m;
}

}  // namespace

Tensor toy_content_image(uint64_t seed, int size) {
  std::mt19937_64 rng(mix_seed(seed, 0xc0));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto g = make_grid(size);

  const double angle = u(rng) * 2 * std::numbers::pi;
  auto ramp = (g.x * std::cos(angle) + g.y * std::sin(angle));
  ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-6);
  auto image = blend(color(rng, 0.2, 0.8).expand({3, size, size}), color(rng, 0.2, 0.8).expand({3, size, size}), ramp);

  const int shapes = 1 + static_cast<int>(u(rng) * 3);
  for (int i = 0; i < shapes; ++i) {
    const double cx = 0.2 + 0.6 * u(rng), cy = 0.2 + 0.6 * u(rng);
    const double rx = 0.1 + 0.2 * u(rng), ry = 0.1 + 0.2 * u(rng);
    auto dx = (g.x - cx) / rx, dy = (g.y - cy) / ry;
    Tensor mask;
    switch (static_cast<int>(u(rng) * 3)) {
      case 0:  // ellipse
        mask = torch::sigmoid((1.0 - (dx * dx + dy * dy)) * 12.0);
        break;
      case 1:  // box
        mask = torch::sigmoid((1.0 - torch::max(dx.abs(), dy.abs())) * 12.0);
        break;
      default:  // triangle
        mask = torch::sigmoid(((dy + 1.0) * 0.5 - dx.abs()) * 12.0) * torch::sigmoid((1.0 - dy.abs()) * 12.0);
        break;
    }
    auto shade = 0.75 + 0.25 * (1.0 - (g.y - cy + ry) / (2 * ry)).clamp(0.0, 1.0).unsqueeze(0);
    image = blend(image, color(rng, 0.05, 0.95) * shade, mask);
  }
  return image.clamp(0.0, 1.0).contiguous();
}

Tensor toy_style_image(uint64_t seed, int size) {
  std::mt19937_64 rng(mix_seed(seed, 0x5e));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto g = make_grid(size);
  const auto two_pi = 2 * std::numbers::pi;

  auto c0 = color(rng, 0.0, 1.0), c1 = color(rng, 0.0, 1.0), c2 = color(rng, 0.0, 1.0);
  const double freq = 3.0 + 9.0 * u(rng);
  const double angle = u(rng) * std::numbers::pi;
  Tensor field;
  switch (static_cast<int>(u(rng) * 5)) {
    case 0:  // stripes
      field = torch::sin(two_pi * freq * (g.x * std::cos(angle) + g.y * std::sin(angle)));
      break;
    case 1:  // checker
      field = torch::sin(two_pi * freq * g.x) * torch::sin(two_pi * freq * g.y) * 4.0;
      break;
    case 2: {  // dots
      auto fx = torch::frac(g.x * freq) - 0.5, fy = torch::frac(g.y * freq) - 0.5;
      field = (0.3 - torch::sqrt(fx * fx + fy * fy)) * 10.0;
      break;
    }
    case 3:  // waves
      field = torch::sin(two_pi * freq * g.x + 2.5 * torch::sin(two_pi * 2.0 * g.y + u(rng) * two_pi));
      break;
    default: {  // blobs
      field = torch::zeros({size, size});
      for (int k = 0; k < 4; ++k) {
        const double fx = 1 + 4 * u(rng), fy = 1 + 4 * u(rng), ph = u(rng) * two_pi;
        field = field + torch::sin(two_pi * (fx * g.x + fy * g.y) + ph);
      }
      break;
    }
  }
  auto hard = torch::sigmoid(field * 4.0);
  auto image = blend(c0.expand({3, size, size}), c1.expand({3, size, size}), hard);
  auto accents = torch::sigmoid((torch::sin(two_pi * 0.7 * freq * g.y + 1.3) - 0.6) * 8.0);
  image = blend(image, c2.expand({3, size, size}), accents * 0.6);
  auto grain = seeded_randn({3, size, size}, mix_seed(seed, 0x9a)) * 0.04;
  return (image + grain).clamp(0.0, 1.0).contiguous();
}

ToyCorpusPaths write_toy_corpus(const std::filesystem::path& root, int content_count, int style_count, int size,
                                uint64_t seed) {
  ToyCorpusPaths paths{root / "content", root / "style"};
  std::filesystem::create_directories(paths.content_dir);
  std::filesystem::create_directories(paths.style_dir);
  char name[32];
  for (int i = 0; i < content_count; ++i) {
    std::snprintf(name, sizeof(name), "c%04d.png", i);
    write_png(paths.content_dir / name, toy_content_image(mix_seed(seed, 2 * static_cast<uint64_t>(i)), size));
  }
  for (int i = 0; i < style_count; ++i) {
    std::snprintf(name, sizeof(name), "s%04d.png", i);
    write_png(paths.style_dir / name, toy_style_image(mix_seed(seed, 2 * static_cast<uint64_t>(i) + 1), size));
  }
  return paths;
}

std::vector<torch::Tensor> load_image_dir(const std::filesystem::path& dir, int size) {
  std::vector<torch::Tensor> images;
  for (const auto& path : list_pngs(dir)) images.push_back(resize_image(read_png(path), size));
  return images;
}

}  // namespace diffnst
