#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "diffnst/tensor_io.hpp"
#include "json.hpp"

namespace diffnst {

// Miniature latent diffusion backbone: a conv autoencoder, a UNet noise
// predictor with one self-attention block per resolution level in each half
// (plus the mid block), and a linear-beta diffusion schedule. Unconditional
// only; there is no text pathway.

struct BackboneConfig {
  int image_size = 64;
  int latent_channels = 4;
  int downsample_factor = 4;
  std::vector<int> unet_channel_widths{64, 128, 256};
  int attention_head_count = 4;
  int train_timesteps = 1000;
  int sampling_steps = 50;

  int latent_size() const { return image_size / downsample_factor; }
  int levels() const { return static_cast<int>(unet_channel_widths.size()); }
  // V width of every attention site in enumeration order.
  std::vector<int> v_dim_per_site() const;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

class DiffusionSchedule {
 public:
  static DiffusionSchedule linear(int train_timesteps, int sampling_steps, double beta_start = 1e-4,
                                  double beta_end = 2e-2);

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  // Strictly increasing subsequence of [0, train_timesteps).
  const std::vector<int64_t>& sampling_indices() const { return sampling_indices_; }
  int steps() const { return static_cast<int>(sampling_indices_.size()); }
  int train_timesteps() const { return static_cast<int>(betas_.size()); }

  // Sampling steps are counted in generation order: step 0 is the noisiest
  // reverse step, step steps()-1 produces the clean latent.
  int64_t timestep_at(int step) const;
  double alpha_bar_at(int step) const;
  // alpha_bar of the state a reverse step lands on; 1 after the final step.
  double alpha_bar_after(int step) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<int64_t> sampling_indices_;
};

enum class Half { kEncoderDown, kMid, kDecoderUp };

std::string to_string(Half half);

struct AttentionSite {
  std::string site_id;
  Half half = Half::kEncoderDown;
  int level = 0;
  int block = 0;
  int token_count = 0;
  int v_dim = 0;
  int index = 0;  // position in the enumeration

  bool operator==(const AttentionSite&) const = default;
};

struct AttentionHook {
  // Receives per-head-merged q, k, v of shape [B, tokens, v_dim].
  std::function<void(const AttentionSite&, int step, const torch::Tensor& q, const torch::Tensor& k,
                     const torch::Tensor& v)>
      observe;
  // Must return a tensor with the shape of v.
  std::function<torch::Tensor(const AttentionSite&, int step, const torch::Tensor& v)> replace_v;
};

// Per-invocation set of hooks keyed by site_id.
class HookSet {
 public:
  HookSet& set(const std::string& site_id, AttentionHook hook);
  HookSet& set_all(const std::vector<AttentionSite>& sites, const AttentionHook& hook);
  const AttentionHook* find(const std::string& site_id) const;
  bool empty() const { return hooks_.empty(); }
  const std::map<std::string, AttentionHook>& hooks() const { return hooks_; }

 private:
  std::map<std::string, AttentionHook> hooks_;
};

struct HookContext {
  const HookSet* hooks = nullptr;
  int step = 0;
};

namespace nets {

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_channels, int out_channels, int time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_embedding);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(AttentionSite site, int heads);
  torch::Tensor forward(const torch::Tensor& x, const HookContext& ctx);
  const AttentionSite& site() const { return site_; }

 private:
  AttentionSite site_;
  int heads_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(SelfAttention);

class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(const BackboneConfig& config, const std::vector<AttentionSite>& sites);
  torch::Tensor forward(const torch::Tensor& latent, const torch::Tensor& timesteps, const HookContext& ctx);

 private:
  torch::Tensor embed_time(const torch::Tensor& timesteps) const;

  int base_width_;
  torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::ModuleList down_res_{nullptr}, down_attn_{nullptr}, downsample_{nullptr};
  ResBlock mid_res1_{nullptr}, mid_res2_{nullptr};
  SelfAttention mid_attn_{nullptr};
  torch::nn::ModuleList up_res_{nullptr}, up_attn_{nullptr}, upsample_conv_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(UNet);

class AutoencoderImpl : public torch::nn::Module {
 public:
  explicit AutoencoderImpl(const BackboneConfig& config);
  // Raw (unscaled) latents.
  torch::Tensor encode(const torch::Tensor& images);
  torch::Tensor decode(const torch::Tensor& latents);

 private:
  torch::nn::Sequential encoder_{nullptr}, decoder_{nullptr};
};
TORCH_MODULE(Autoencoder);

}  // namespace nets

// What the sampler needs from a denoiser. Backbone is the real one; tests
// substitute stubs and counters.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual torch::Tensor predict_noise_at(const torch::Tensor& latent, int64_t timestep,
                                         const HookSet* hooks = nullptr, int step = 0) const = 0;
  virtual const std::vector<AttentionSite>& enumerate_attention_sites() const = 0;
  virtual int train_timesteps() const = 0;
  // Unbatched latent shape [C, h, w].
  virtual std::vector<int64_t> latent_shape() const = 0;
  virtual std::string fingerprint() const = 0;
};

// Frozen after pretraining: nothing downstream ever updates these weights.
class Backbone : public NoisePredictor {
 public:
  explicit Backbone(BackboneConfig config, uint64_t seed = 0);

  const BackboneConfig& config() const { return config_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  DiffusionSchedule schedule_with_steps(int sampling_steps) const;

  // image: [3,H,W] or [B,3,H,W] in [0,1] -> latent [C,h,w] or [B,C,h,w].
  torch::Tensor encode(const torch::Tensor& image) const;
  // latent -> image in [0,1] with matching batch rank.
  torch::Tensor decode(const torch::Tensor& latent) const;

  // Noise prediction at a training timestep. `step` is only forwarded to hooks.
  torch::Tensor predict_noise_at(const torch::Tensor& latent, int64_t timestep, const HookSet* hooks = nullptr,
                                 int step = 0) const override;
  // Noise prediction at a sampling step of the default schedule.
  torch::Tensor predict_noise(const torch::Tensor& latent, int step, const HookSet* hooks = nullptr) const;

  const std::vector<AttentionSite>& enumerate_attention_sites() const override { return sites_; }
  int train_timesteps() const override { return config_.train_timesteps; }
  std::vector<int64_t> latent_shape() const override {
    return {config_.latent_channels, config_.latent_size(), config_.latent_size()};
  }
  std::vector<AttentionSite> sites_in(Half half) const;
  const AttentionSite& site(const std::string& site_id) const;

  // Mutable access for pretraining only.
  nets::Autoencoder& autoencoder() { return autoencoder_; }
  nets::UNet& unet() { return unet_; }
  std::vector<torch::Tensor> parameters() const;
  // Parameters and buffers by qualified name.
  NamedTensors named_state() const;

  float latent_scale() const { return latent_scale_; }
  void set_latent_scale(float scale);

  void freeze();
  bool frozen() const { return frozen_; }

  // Hash over every parameter tensor.
  std::string parameter_checksum() const;
  // Hash over config + parameters + latent scale; traces and checkpoints carry it.
  std::string fingerprint() const override;

  void save(const std::filesystem::path& dir) const;
  static std::shared_ptr<Backbone> load(const std::filesystem::path& dir);

 private:
  void check_image(const torch::Tensor& image) const;
  void check_latent(const torch::Tensor& latent) const;
  void check_hooks(const HookSet& hooks) const;

  BackboneConfig config_;
  DiffusionSchedule schedule_;
  std::vector<AttentionSite> sites_;
  nets::Autoencoder autoencoder_{nullptr};
  nets::UNet unet_{nullptr};
  float latent_scale_ = 1.0f;
  bool frozen_ = false;
  mutable std::string fingerprint_cache_;
};

}  // namespace diffnst
