#include "diffnst/features.hpp"

#include <cmath>

#include "diffnst/error.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

torch::Tensor FeatureExtractor::perceptual(const torch::Tensor& images) const {
  return features(images).at(static_cast<std::size_t>(perceptual_layer()));
}

RandomConvExtractor::RandomConvExtractor(uint64_t seed, std::vector<int> widths)
    : seed_(seed), widths_(std::move(widths)) {
  if (widths_.empty()) throw ConfigError("feature extractor needs at least one layer");
  int in = 3;
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    const int out = widths_[i];
    const double scale = std::sqrt(2.0 / (in * 9));
    weights_.push_back(seeded_randn({out, in, 3, 3}, mix_seed(seed_, 2 * i)) * scale);
    biases_.push_back(seeded_randn({out}, mix_seed(seed_, 2 * i + 1)) * 0.05);
    in = out;
  }
}

std::string RandomConvExtractor::id() const {
  std::string s = "random-conv:" + std::to_string(seed_);
  for (int w : widths_) s += ":" + std::to_string(w);
  return s;
}

std::vector<torch::Tensor> RandomConvExtractor::features(const torch::Tensor& images) const {
  auto x = as_batch(images);
  if (x.dim() != 4 || x.size(1) != 3) throw ConfigError("feature extractor expects [B,3,H,W] images");
  // Centre roughly on [0,1] image statistics.
  x = (x - 0.5) / 0.25;
  std::vector<torch::Tensor> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (i > 0) x = torch::avg_pool2d(x, 2, 2, 0, /*ceil_mode=*/true);
    const auto& w = weights_[i];
    x = torch::relu(torch::conv2d(x, w.to(x.dtype()), biases_[i].to(x.dtype()), 1, 1));
    out.push_back(x);
  }
  return out;
}

std::vector<torch::Tensor> IdentityExtractor::features(const torch::Tensor& images) const {
  return {as_batch(images)};
}

std::shared_ptr<const FeatureExtractor> default_extractor() {
  static auto extractor = std::make_shared<const RandomConvExtractor>();
  return extractor;
}

std::pair<torch::Tensor, torch::Tensor> channel_stats(const torch::Tensor& feature) {
  auto flat = feature.flatten(2);
  auto mean = flat.mean(2);
  auto var = (flat - mean.unsqueeze(2)).pow(2).mean(2);
  return {mean, torch::sqrt(var + kStatEps)};
}

}  // namespace diffnst
