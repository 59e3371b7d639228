#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "diffnst/features.hpp"
#include "diffnst/style_embed.hpp"
#include "json.hpp"

namespace diffnst {

struct LossWeights {
  double vgg = 0.5;
  double adv = 5.0;
  double percep = 6.0;
  double identity = 100.0;
  double aladin = 10.0;
  double contra = 1.0;
  double patch = 10.0;
  double p_simple = 0.25;
  double p_complex = 0.75;
  double temperature = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
  // Every weight 1 (temperature kept), for unscaled checks.
  static LossWeights unit();
};

// Term names in the order of the final objective.
const std::vector<std::string>& loss_term_names();

struct LossConfig {
  LossWeights weights;
  std::set<std::string> disabled;
  int crop_size = 16;
  int crops_per_bin = 4;
  int crop_candidates = 64;

  bool enabled(const std::string& term) const { return disabled.count(term) == 0; }
  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

// Logit-valued classifiers; D(x) = sigmoid(logit).
using Critic = std::function<torch::Tensor(const torch::Tensor& images)>;
using PatchCritic = std::function<torch::Tensor(const torch::Tensor& query, const torch::Tensor& reference)>;

class DomainDiscriminatorImpl : public torch::nn::Module {
 public:
  DomainDiscriminatorImpl();
  torch::Tensor forward(const torch::Tensor& images);  // [B,3,H,W] -> logits [B]

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(DomainDiscriminator);

// Judges a query crop against a reference style crop; each is RGB plus its Sobel map.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl();
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& reference);  // [B,4,s,s] x2 -> [B]

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// Two-layer MLP followed by L2 normalisation.
class ProjectionHeadImpl : public torch::nn::Module {
 public:
  ProjectionHeadImpl(int in_dim, int hidden = 128, int out_dim = 64);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ProjectionHead);

// Individual terms. Images are [3,H,W] or [B,3,H,W]; norms are plain L2
// norms per image, averaged over the batch. Each result carries its weight.
torch::Tensor style_loss(const FeatureExtractor& extractor, const torch::Tensor& stylized, const torch::Tensor& style,
                         const LossWeights& w = {});
torch::Tensor perceptual_loss(const FeatureExtractor& extractor, const torch::Tensor& stylized,
                              const torch::Tensor& content, const LossWeights& w = {});
torch::Tensor identity_loss(const torch::Tensor& reconstruction, const torch::Tensor& target, const LossWeights& w = {});
torch::Tensor identity_losses(const torch::Tensor& style_identity, const torch::Tensor& style,
                              const torch::Tensor& content_identity, const torch::Tensor& content,
                              const LossWeights& w = {});
torch::Tensor aladin_loss(const StyleEncoder& encoder, const torch::Tensor& stylized, const torch::Tensor& style,
                          const LossWeights& w = {});
// Code-level form; rejects codes from different encoders.
torch::Tensor aladin_loss(const StyleCode& stylized, const StyleCode& style, const LossWeights& w = {});

struct AdversarialTerms {
  torch::Tensor generator;      // w.adv * E[-log D(fake)]
  torch::Tensor discriminator;  // w.adv * (E[log D(real)] + E[log(1 - D(fake))]), to be maximised
};
// The discriminator term sees a detached copy of the stylized image.
AdversarialTerms adversarial_losses(const Critic& critic, const torch::Tensor& style, const torch::Tensor& stylized,
                                    const LossWeights& w = {});

struct PatchTerms {
  torch::Tensor simple;  // w.patch * w.p_simple * E[-log D_patch(fake pair)]
  torch::Tensor complex;
  torch::Tensor simple_discriminator;  // objective to maximise, same weights
  torch::Tensor complex_discriminator;
};
// Fake pairs: stylized crop vs style crop. Real pairs: two different style crops of the same bin.
PatchTerms patch_losses(const PatchCritic& critic, const torch::Tensor& stylized, const torch::Tensor& style,
                        const LossConfig& config, uint64_t seed);

struct ContrastiveItem {
  int style_id = 0;
  int content_id = 0;
  torch::Tensor style_embedding;    // l_s output, unit norm
  torch::Tensor content_embedding;  // l_c output, unit norm
};

struct ContrastiveTerms {
  torch::Tensor style;
  torch::Tensor content;
};

// True when some item has both a positive and a negative for each term.
bool has_contrastive_pairings(const std::vector<ContrastiveItem>& items);
// InfoNCE over every anchor with at least one positive, averaged. Throws
// BatchError when no anchor qualifies.
ContrastiveTerms contrastive_losses(const std::vector<ContrastiveItem>& items, const LossWeights& w = {});

struct LossModules {
  std::shared_ptr<const FeatureExtractor> extractor;
  std::shared_ptr<const StyleEncoder> encoder;
  DomainDiscriminator domain{nullptr};
  PatchDiscriminator patch{nullptr};
  ProjectionHead style_head{nullptr};
  ProjectionHead content_head{nullptr};

  // Default architecture; descriptor_dim is the pooled attention width.
  static LossModules create(std::shared_ptr<const FeatureExtractor> extractor,
                            std::shared_ptr<const StyleEncoder> encoder, int descriptor_dim, uint64_t seed);
  std::vector<torch::Tensor> discriminator_parameters() const;
  std::vector<torch::Tensor> head_parameters() const;
  NamedTensors named_state() const;
  void load_state(const NamedTensors& state);
  void to(torch::Dtype dtype);
};

struct ContrastiveSample {
  int style_id = 0;
  int content_id = 0;
  torch::Tensor descriptor;  // per-step averaged decoder attention, [E]
};

struct StylizationBatch {
  torch::Tensor content;           // I_c, colour matched
  torch::Tensor style;             // I_s
  torch::Tensor stylized;          // I_sc
  torch::Tensor style_identity;    // I_ss
  torch::Tensor content_identity;  // I_cc
  std::vector<ContrastiveSample> contrastive;
  uint64_t crop_seed = 0;
};

struct LossBreakdown {
  // Weighted enabled terms, in loss_term_names() order.
  std::vector<std::pair<std::string, torch::Tensor>> terms;
  torch::Tensor total;
  // Discriminator losses to minimise (negated objectives); undefined when disabled.
  torch::Tensor domain_discriminator;
  torch::Tensor patch_discriminator;

  bool has(const std::string& term) const;
  double value(const std::string& term) const;
  nlohmann::json to_json() const;
};

// Throws LossError naming the first non-finite term.
LossBreakdown total_loss(const StylizationBatch& batch, const LossModules& modules, const LossConfig& config);

// One {"step","term","value"} record per term and discriminator loss.
void write_loss_log(std::ostream& out, int64_t step, const LossBreakdown& breakdown);

}  // namespace diffnst
