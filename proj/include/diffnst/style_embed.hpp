#pragma once

#include <torch/torch.h>

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "diffnst/features.hpp"
#include "diffnst/tensor_io.hpp"

namespace diffnst {

struct StyleCode {
  torch::Tensor values;  // [D]
  std::string encoder_id;

  int64_t dim() const { return values.defined() ? values.numel() : 0; }
};

class StyleEncoder {
 public:
  virtual ~StyleEncoder() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  virtual bool trainable() const = 0;
  // Differentiable batch path: [B,3,H,W] -> [B,D].
  virtual torch::Tensor encode_values(const torch::Tensor& images) const = 0;
  virtual std::vector<torch::Tensor> parameters() const { return {}; }
  virtual NamedTensors named_state() const { return {}; }
  virtual void load_state(const NamedTensors&) {}

  // Detached code of a single [3,H,W] image.
  StyleCode encode(const torch::Tensor& image) const;
};

// Throws EncoderError unless every code comes from the same encoder and has the same dimension.
void require_same_encoder(const std::vector<const StyleCode*>& codes);

// Channel means and stds of every extractor layer, concatenated, then a
// seed-fixed linear projection to D. Frozen unless `trainable`.
class StatsStyleEncoder final : public StyleEncoder {
 public:
  StatsStyleEncoder(std::shared_ptr<const FeatureExtractor> extractor, int stat_dim, int dim = 256,
                    uint64_t seed = 99, bool trainable = false);

  std::string id() const override;
  int dim() const override { return dim_; }
  bool trainable() const override { return trainable_; }
  torch::Tensor encode_values(const torch::Tensor& images) const override;
  std::vector<torch::Tensor> parameters() const override;
  NamedTensors named_state() const override;
  void load_state(const NamedTensors& state) override;

  // Unprojected statistics vector, [B, stat_dim].
  torch::Tensor statistics(const torch::Tensor& images) const;

 private:
  std::shared_ptr<const FeatureExtractor> extractor_;
  int stat_dim_;
  int dim_;
  uint64_t seed_;
  bool trainable_;
  torch::Tensor weight_;  // [D, stat_dim]
  torch::Tensor bias_;    // [D]
};

// Stats encoder over the default extractor, sized automatically.
std::shared_ptr<StatsStyleEncoder> make_stats_encoder(int dim = 256, bool trainable = false);

class EncoderRegistry {
 public:
  void add(std::shared_ptr<StyleEncoder> encoder);
  std::shared_ptr<StyleEncoder> get(const std::string& id) const;
  bool contains(const std::string& id) const { return encoders_.count(id) > 0; }
  std::vector<std::string> ids() const;

  // Registry pre-populated with the built-in encoders.
  static EncoderRegistry with_defaults(int dim = 256, bool trainable = false);

 private:
  std::map<std::string, std::shared_ptr<StyleEncoder>> encoders_;
};

inline constexpr const char* kStatsEncoderName = "stats";

}  // namespace diffnst
