#pragma once

#include <torch/torch.h>

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "diffnst/backbone.hpp"
#include "diffnst/diffusion.hpp"
#include "diffnst/style_embed.hpp"
#include "diffnst/tensor_io.hpp"

namespace diffnst {

struct HijackOptions {
  // Hidden widths as multiples of the site's v_dim.
  std::vector<int> hidden_multipliers = {2};
  bool residual = true;
  bool zero_init_final = true;
  int code_dim = 256;

  nlohmann::json to_json() const;
  static HijackOptions from_json(const nlohmann::json& j);
};

// Per-token MLP: [content V, style V, code] -> new V.
class HijackMLPImpl : public torch::nn::Module {
 public:
  HijackMLPImpl(int v_dim, const HijackOptions& options);

  // content_v, style_v: [B,N,C]; code: [D].
  torch::Tensor forward(const torch::Tensor& content_v, const torch::Tensor& style_v, const torch::Tensor& code);

  int v_dim() const { return v_dim_; }

 private:
  int v_dim_;
  bool residual_;
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(HijackMLP);

// One MLP per decoder-half attention site.
class HijackSet {
 public:
  HijackSet(const std::vector<AttentionSite>& sites, HijackOptions options = {});

  const std::vector<AttentionSite>& sites() const { return sites_; }
  std::vector<std::string> site_ids() const;
  const HijackOptions& options() const { return options_; }
  HijackMLP mlp(const std::string& site_id) const;

  torch::Tensor hijack_v(const std::string& site_id, int step, const torch::Tensor& content_v,
                         const AttentionTrace& style_trace, const StyleCode& code) const;

  std::vector<torch::Tensor> parameters() const;
  int64_t parameter_count() const;
  // Keys are "<site_id>/<layer parameter>".
  NamedTensors named_state() const;
  void load_state(const NamedTensors& state);

  void train(bool on = true);

 private:
  std::vector<AttentionSite> sites_;
  HijackOptions options_;
  std::shared_ptr<torch::nn::Module> root_;
  std::vector<HijackMLP> mlps_;
};

// Throws ConfigError when no decoder site exists.
HijackSet build_hijack(const std::vector<AttentionSite>& sites, HijackOptions options = {});

// Optional observer of each replaced V, e.g. to pool attention for the contrastive heads.
using VTap = std::function<void(const AttentionSite&, int step, const torch::Tensor& v)>;

// Routes decoder sites through hijack_v for steps < stop_step. The policy holds
// shared handles to the MLPs and a copy of the trace.
AttentionPolicy wire_policy(const HijackSet& hijack, const AttentionTrace& style_trace, const StyleCode& code,
                            int stop_step, VTap tap = {});

}  // namespace diffnst
