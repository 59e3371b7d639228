#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace diffnst {

// Multi-layer feature maps phi_1..phi_L. Inputs are [B,3,H,W] (or a single
// [3,H,W]) in [0,1]; outputs are [B,C_i,H_i,W_i]. Implementations follow the
// input dtype so gradient checks can run in double.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<torch::Tensor> features(const torch::Tensor& images) const = 0;
  virtual int perceptual_layer() const = 0;
  virtual std::string id() const = 0;

  torch::Tensor perceptual(const torch::Tensor& images) const;
};

// Frozen conv pyramid with seed-fixed random weights: conv3x3 + ReLU per
// layer, 2x average pooling between layers. Perceptual layer is the deepest.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed = 1234, std::vector<int> widths = {16, 32, 64, 64});

  std::vector<torch::Tensor> features(const torch::Tensor& images) const override;
  int perceptual_layer() const override { return static_cast<int>(weights_.size()) - 1; }
  std::string id() const override;
  const std::vector<int>& widths() const { return widths_; }

 private:
  uint64_t seed_;
  std::vector<int> widths_;
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

// Single layer that returns the pixels themselves. Oracle stand-in for tests.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<torch::Tensor> features(const torch::Tensor& images) const override;
  int perceptual_layer() const override { return 0; }
  std::string id() const override { return "identity"; }
};

std::shared_ptr<const FeatureExtractor> default_extractor();

inline constexpr double kStatEps = 1e-5;

// Per-channel spatial mean and sqrt(var + kStatEps) of [B,C,H,W] features -> [B,C] each.
std::pair<torch::Tensor, torch::Tensor> channel_stats(const torch::Tensor& feature);

inline torch::Tensor as_batch(const torch::Tensor& images) { return images.dim() == 3 ? images.unsqueeze(0) : images; }

}  // namespace diffnst
