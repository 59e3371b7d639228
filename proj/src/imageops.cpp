#include "diffnst/imageops.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "diffnst/error.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

namespace {

void require_finite(const torch::Tensor& image, const char* what) {
  if (!image.defined() || image.dim() != 3) throw ConfigError(std::string(what) + " must be a [C,H,W] tensor");
  if (!torch::isfinite(image).all().item<bool>()) throw ConfigError(std::string(what) + " has non-finite values");
}

// Symmetric matrix function through the eigendecomposition.
torch::Tensor sym_apply(const torch::Tensor& sym, const std::function<torch::Tensor(const torch::Tensor&)>& fn) {
  auto [evals, evecs] = torch::linalg_eigh(0.5 * (sym + sym.t()));
  return evecs.matmul(torch::diag(fn(evals))).matmul(evecs.t());
}

}  // namespace

ColorStats color_stats(const torch::Tensor& image) {
  auto flat = image.detach().to(torch::kFloat64).reshape({image.size(0), -1});
  auto mean = flat.mean(1);
  auto centered = flat - mean.unsqueeze(1);
  auto cov = centered.matmul(centered.t()) / static_cast<double>(flat.size(1));
  return {mean, 0.5 * (cov + cov.t())};
}

torch::Tensor match_colors(const torch::Tensor& content, const torch::Tensor& style, bool clamp) {
  require_finite(content, "content image");
  require_finite(style, "style image");
  if (content.size(0) != style.size(0)) throw ConfigError("content and style channel counts differ");

  const auto c = color_stats(content);
  const auto s = color_stats(style);
  auto style_sqrt = sym_apply(s.covariance, [](const torch::Tensor& ev) { return ev.clamp_min(0.0).sqrt(); });
  auto content_isqrt =
      sym_apply(c.covariance, [](const torch::Tensor& ev) { return ev.clamp_min(kColorRegularizer).rsqrt(); });
  auto transform = style_sqrt.matmul(content_isqrt);

  auto flat = content.detach().to(torch::kFloat64).reshape({content.size(0), -1});
  auto out = transform.matmul(flat - c.mean.unsqueeze(1)) + s.mean.unsqueeze(1);
  out = out.reshape(content.sizes());
  if (clamp) out = out.clamp(0.0, 1.0);
  return out.to(torch::kFloat32);
}

torch::Tensor sobel_map(const torch::Tensor& image) {
  const bool batched = image.dim() == 4;
  auto x = batched ? image : image.unsqueeze(0);
  if (x.size(1) != 3) throw ConfigError("sobel_map expects RGB images");
  auto luma_weights = torch::tensor({0.299, 0.587, 0.114}, x.options()).view({1, 3, 1, 1});
  auto luma = (x * luma_weights).sum(1, true);
  namespace F = torch::nn::functional;
  auto padded = F::pad(luma, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto gx = torch::tensor({{-1.0, 0.0, 1.0}, {-2.0, 0.0, 2.0}, {-1.0, 0.0, 1.0}}, x.options()).view({1, 1, 3, 3});
  auto gy = gx.transpose(2, 3).contiguous();
  auto dx = torch::conv2d(padded, gx);
  auto dy = torch::conv2d(padded, gy);
  auto magnitude = torch::sqrt(dx * dx + dy * dy + 1e-12) - 1e-6;
  magnitude = magnitude.clamp_min(0.0).squeeze(1);
  return batched ? magnitude : magnitude.squeeze(0);
}

std::vector<CropWindow> select_crops(const torch::Tensor& sobel, int n, int size, CropBin bin, uint64_t seed,
                                     int candidates) {
  if (n < 1) throw ConfigError("need at least one crop");
  if (sobel.dim() != 2) throw ConfigError("sobel map must be [H,W]");
  const int h = static_cast<int>(sobel.size(0)), w = static_cast<int>(sobel.size(1));
  if (size < 1 || size > h || size > w) {
    throw ConfigError("crop size " + std::to_string(size) + " exceeds image " + std::to_string(h) + "x" +
                      std::to_string(w));
  }

  // Integral image for window means.
  auto integral = torch::zeros({h + 1, w + 1}, torch::kFloat64);
  integral.narrow(0, 1, h).narrow(1, 1, w).copy_(sobel.detach().to(torch::kFloat64).cumsum(0).cumsum(1));
  auto acc = integral.accessor<double, 2>();

  std::mt19937_64 rng(mix_seed(seed, 0xc40));
  std::uniform_int_distribution<int> top_dist(0, h - size), left_dist(0, w - size);
  std::vector<CropWindow> pool(static_cast<std::size_t>(std::max(candidates, 1)));
  for (auto& win : pool) {
    win.top = top_dist(rng);
    win.left = left_dist(rng);
    const int t = win.top, l = win.left, b = t + size, r = l + size;
    win.score = (acc[b][r] - acc[t][r] - acc[b][l] + acc[t][l]) / (size * size);
  }
  std::stable_sort(pool.begin(), pool.end(), [](const CropWindow& a, const CropWindow& b) { return a.score < b.score; });

  const std::size_t quartile = std::max<std::size_t>(1, pool.size() / 4);
  const std::size_t offset = bin == CropBin::kSimple ? 0 : pool.size() - quartile;
  std::vector<CropWindow> chosen;
  std::uniform_int_distribution<std::size_t> pick(0, quartile - 1);
  for (int i = 0; i < n; ++i) {
    // Without replacement while the bin lasts.
    const std::size_t index = static_cast<std::size_t>(i) < quartile ? static_cast<std::size_t>(i) : pick(rng);
    chosen.push_back(pool[offset + index]);
  }
  return chosen;
}

torch::Tensor crops_with_sobel(const torch::Tensor& image, const torch::Tensor& sobel,
                               const std::vector<CropWindow>& windows, int size) {
  auto stacked = torch::cat({image, sobel.unsqueeze(0).to(image.dtype())}, 0);
  std::vector<torch::Tensor> crops;
  for (const auto& win : windows) crops.push_back(stacked.narrow(1, win.top, size).narrow(2, win.left, size));
  return torch::stack(crops);
}

std::vector<torch::Tensor> sample_crops(const torch::Tensor& image, const torch::Tensor& sobel, int n, int size,
                                        CropBin bin, uint64_t seed, int candidates) {
  if (image.dim() != 3 || image.size(1) != sobel.size(0) || image.size(2) != sobel.size(1)) {
    throw ConfigError("image and sobel map sizes differ");
  }
  std::vector<torch::Tensor> crops;
  for (const auto& win : select_crops(sobel, n, size, bin, seed, candidates)) {
    crops.push_back(image.narrow(1, win.top, size).narrow(2, win.left, size));
  }
  return crops;
}

}  // namespace diffnst
