#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffnst/backbone.hpp"
#include "diffnst/diffusion.hpp"
#include "diffnst/hijack.hpp"
#include "diffnst/style_embed.hpp"
#include "json.hpp"

namespace diffnst {

// An image pushed through encode + DDIM inversion with attention recorded.
struct InvertedImage {
  torch::Tensor image;
  torch::Tensor latent;
  NoiseTrace noise;
  torch::Tensor terminal;
  AttentionTrace attention;
};

struct RenderResult {
  torch::Tensor image;
  torch::Tensor latent;
  // Token-mean of the hijacked decoder V, concatenated over sites and
  // averaged over the steps where replacement fired. Undefined if none did.
  torch::Tensor descriptor;
  std::optional<AttentionTrace> attention;  // when recording was requested
};

// The hijacked reverse-diffusion core shared by training and inference.
class Stylizer {
 public:
  Stylizer(std::shared_ptr<const Backbone> backbone, HijackSet hijack, std::shared_ptr<const StyleEncoder> encoder,
           int steps = 0);

  const Backbone& backbone() const { return *backbone_; }
  std::shared_ptr<const Backbone> backbone_ptr() const { return backbone_; }
  const Sampler& sampler() const { return sampler_; }
  int steps() const { return sampler_.steps(); }
  const HijackSet& hijack() const { return hijack_; }
  const StyleEncoder& encoder() const { return *encoder_; }
  // Sum of decoder v_dims.
  int descriptor_dim() const;

  InvertedImage invert(const torch::Tensor& image) const;
  StyleCode style_code(const torch::Tensor& style_image) const;

  // Differentiable with respect to the hijack parameters and the code.
  RenderResult render(const InvertedImage& content, const AttentionTrace& style_trace, const StyleCode& code,
                      const InjectionWindow& window, int attn_stop, bool record_replaced = false) const;
  // Reverse with no attention changes, recording every live V.
  RenderResult reconstruct(const InvertedImage& content, const InjectionWindow& window, bool record = false) const;

 private:
  std::shared_ptr<const Backbone> backbone_;
  HijackSet hijack_;
  std::shared_ptr<const StyleEncoder> encoder_;
  Sampler sampler_;
};

// Inference controls. Unset window bounds and attn_stop take the operating
// point scaled to the sampler (5/45 and T at 50 steps).
struct StylizeOptions {
  std::optional<int> noise_start;
  std::optional<int> noise_end;
  std::optional<int> attn_stop;
  bool color_match = true;
  uint64_t seed = 0;

  InjectionWindow window(int steps) const;
  int stop(int steps) const;
  void validate(int steps) const;
  nlohmann::json to_json() const;
};

struct StylizeRequest {
  std::filesystem::path content;
  std::filesystem::path style;
  StylizeOptions options;
  std::filesystem::path output;

  nlohmann::json to_json() const;
};

enum class SweepAxis { kNoiseStart, kAttnStop };
SweepAxis parse_sweep_axis(const std::string& name);
std::string to_string(SweepAxis axis);

struct SweepResult {
  std::vector<int> values;
  std::vector<torch::Tensor> images;
  torch::Tensor grid;
};

struct InterpolationTraces {
  InvertedImage content;
  InjectionWindow window;
  AttentionTrace content_trace;   // plain reconstruction, every live V
  AttentionTrace stylized_trace;  // hijacked run, replaced decoder V
};

struct Heatmap {
  std::vector<std::string> sites;
  int steps = 0;
  torch::Tensor raw;         // [sites, steps] mean |dV|
  torch::Tensor normalized;  // raw / max(raw), in [0,1]

  // Steps run left to right, one row per site.
  torch::Tensor render(int cell = 8) const;
  nlohmann::json to_json() const;
};

// Mean |V_a - V_b| per (site, step) over identical grids. Throws TraceError on grid mismatch.
Heatmap attention_diff_heatmap(const AttentionTrace& a, const AttentionTrace& b);

// Reverse with V := (1 - alpha) V_a + alpha V_b at every decoder (site, step)
// present in b; other sites keep their live values.
ReverseResult interpolate_v(const Sampler& sampler, const torch::Tensor& init, const NoiseTrace* noise,
                            const InjectionWindow& window, const AttentionTrace& trace_a, const AttentionTrace& trace_b,
                            double alpha);

class Pipeline {
 public:
  explicit Pipeline(Stylizer stylizer);
  // steps = 0 keeps the sampling steps the checkpoint was trained with.
  static Pipeline load(const std::filesystem::path& checkpoint, int steps = 0);

  const Stylizer& stylizer() const { return stylizer_; }
  int steps() const { return stylizer_.steps(); }

  // Content resized to the backbone resolution; style resized to the content.
  std::pair<torch::Tensor, torch::Tensor> prepare(const torch::Tensor& content, const torch::Tensor& style,
                                                  bool color_match) const;

  torch::Tensor stylize(const torch::Tensor& content, const torch::Tensor& style, const StylizeOptions& options) const;
  // Reads the inputs; writes <output>/<content>__<style>/{stylized,content,style}.png and meta.json when output is set.
  torch::Tensor stylize(const StylizeRequest& request) const;

  SweepResult sweep(const torch::Tensor& content, const torch::Tensor& style, const StylizeOptions& base,
                    SweepAxis axis, const std::vector<int>& values) const;

  InterpolationTraces interpolation_traces(const torch::Tensor& content, const torch::Tensor& style,
                                           const StylizeOptions& options) const;
  torch::Tensor v_interpolate(const InterpolationTraces& traces, double alpha) const;
  // Stylized vs content V over the (site, step) cells the hijack replaces.
  Heatmap attention_heatmap(const torch::Tensor& content, const torch::Tensor& style,
                            const StylizeOptions& options) const;

 private:
  Stylizer stylizer_;
};

std::filesystem::path result_dir(const std::filesystem::path& out, const std::filesystem::path& content,
                                 const std::filesystem::path& style);

}  // namespace diffnst
