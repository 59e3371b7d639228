#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "diffnst/backbone.hpp"
#include "diffnst/checkpoint.hpp"
#include "diffnst/hijack.hpp"
#include "diffnst/losses.hpp"
#include "diffnst/pipeline.hpp"
#include "diffnst/style_embed.hpp"
#include "json.hpp"

namespace diffnst {

// ---------------------------------------------------------------------------
// Backbone pretraining

struct PretrainConfig {
  BackboneConfig backbone;
  int autoencoder_steps = 4000;
  int denoiser_steps = 6000;
  int batch_size = 8;
  double autoencoder_lr = 1e-3;
  double denoiser_lr = 5e-4;
  // Images held out of autoencoder training for the reconstruction gate.
  int holdout = 8;
  uint64_t seed = 0;
  int log_every = 100;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainReport {
  double holdout_mae = 0.0;
  double final_autoencoder_loss = 0.0;
  double final_denoiser_loss = 0.0;
  float latent_scale = 1.0f;
  int train_images = 0;
  int holdout_images = 0;

  nlohmann::json to_json() const;
};

// Trains the autoencoder (L1 reconstruction), fixes the latent scale to the
// inverse latent std, trains the denoiser on epsilon-prediction MSE, then
// freezes. Throws ConfigError on an empty corpus.
std::shared_ptr<Backbone> pretrain_backbone(const std::vector<torch::Tensor>& images, const PretrainConfig& config,
                                            PretrainReport* report = nullptr, std::ostream* log = nullptr);

// Mean |decode(encode(x)) - x| over the images.
double reconstruction_mae(const Backbone& backbone, const std::vector<torch::Tensor>& images);

// ---------------------------------------------------------------------------
// Optimisation

struct ParamGroup {
  std::string name;
  std::vector<torch::Tensor> params;
  double lr = 1e-4;
};

// Adam over named parameter groups that applies one update every
// `accumulation` micro-steps. backward() scales the loss by 1/accumulation and
// only deposits gradients on this optimizer's parameters.
class AccumulatingOptimizer {
 public:
  AccumulatingOptimizer(std::vector<ParamGroup> groups, int accumulation);

  void backward(const torch::Tensor& loss, bool retain_graph = false);
  // Ends a micro-step; steps and zeroes on the accumulation boundary. Returns true when it stepped.
  bool tick();
  // Applies a partially accumulated window now. Returns true when it stepped.
  bool flush();
  void zero_grad();

  int accumulation() const { return accumulation_; }
  int pending() const { return micro_; }
  int64_t updates() const { return updates_; }
  std::vector<torch::Tensor> parameters() const;
  const std::vector<ParamGroup>& groups() const { return groups_; }
  // Gradients as they were just before the last update.
  const std::vector<torch::Tensor>& last_gradients() const { return last_gradients_; }
  void capture_gradients(bool on) { capture_ = on; }

  // Adam moments keyed "<group>/<index>/<moment>"; step counts and the update counter in the meta.
  NamedTensors state_tensors() const;
  nlohmann::json state_meta() const;
  // `pending` micro-steps of the current window count as already taken.
  void load_state(const NamedTensors& tensors, const nlohmann::json& meta, int pending = 0);

 private:
  std::vector<ParamGroup> groups_;
  int accumulation_;
  int micro_ = 0;
  int64_t updates_ = 0;
  bool capture_ = false;
  std::vector<torch::Tensor> last_gradients_;
  std::unique_ptr<torch::optim::Adam> adam_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int batch_size = 1;
  int grad_accumulation = 8;
  double lr_hijack = 1e-4;
  double lr_heads = 1e-4;
  double lr_encoder = 1e-4;
  double lr_discriminator = 2e-4;
  // Micro-steps (one unrolled forward/backward per pair batch).
  int64_t max_steps = 500;
  uint64_t seed = 0;
  int sampling_steps = 10;
  // Identity reconstructions run with sampling_steps / identity_stride steps.
  int identity_stride = 2;
  std::filesystem::path content_root;
  std::filesystem::path style_root;
  std::filesystem::path backbone;
  std::filesystem::path output_dir;
  // In micro-steps; must be a multiple of grad_accumulation. 0 disables periodic checkpoints.
  int64_t checkpoint_every = 100 * 8;
  std::optional<std::filesystem::path> resume;
  std::string encoder = kStatsEncoderName;
  bool train_encoder = false;
  bool color_match = true;
  HijackOptions hijack;
  LossConfig losses;

  int effective_batch() const { return batch_size * grad_accumulation; }
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
};

struct PairSample {
  torch::Tensor content;
  torch::Tensor style;
  int content_id = 0;
  int style_id = 0;
};

// Everything one pair contributes to the objective.
struct PairForward {
  torch::Tensor content;  // colour matched
  torch::Tensor style;
  torch::Tensor stylized;
  torch::Tensor style_identity;
  torch::Tensor content_identity;
  torch::Tensor descriptor;
};

struct StepRecord {
  int64_t step = 0;
  // Every term of the objective in loss_term_names() order; disabled or not yet pairable terms are 0.
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;
  double disc_domain = 0.0;
  double disc_patch = 0.0;
  bool updated = false;

  double term(const std::string& name) const;
  void write(std::ostream& out) const;
};

class Trainer {
 public:
  Trainer(TrainConfig config, std::shared_ptr<const Backbone> backbone, std::vector<torch::Tensor> contents,
          std::vector<torch::Tensor> styles);

  const TrainConfig& config() const { return config_; }
  const Stylizer& stylizer() const { return stylizer_; }
  const Stylizer& identity_stylizer() const { return identity_stylizer_; }
  const LossModules& modules() const { return modules_; }
  const AccumulatingOptimizer& generator_optimizer() const { return *generator_opt_; }
  const AccumulatingOptimizer& discriminator_optimizer() const { return *discriminator_opt_; }
  AccumulatingOptimizer& generator_optimizer() { return *generator_opt_; }
  int64_t steps_done() const { return step_; }

  // Hijacked unrolled forward of one pair; differentiable in every trainable module.
  PairForward forward_pair(const PairSample& pair);
  // One micro-step on explicit pairs.
  StepRecord train_step(const std::vector<PairSample>& batch);
  // One micro-step on pairs drawn from the corpus.
  StepRecord step();
  // The pairs step() would draw at the given micro-step.
  std::vector<PairSample> sample_batch(int64_t step) const;
  // Applies any partially accumulated window.
  bool flush();

  Checkpoint checkpoint() const;
  // Throws TraceError on a backbone fingerprint mismatch.
  void restore(const Checkpoint& checkpoint);

 private:
  struct StyleCache {
    InvertedImage full;
    InvertedImage identity;
  };
  StyleCode code_for(const torch::Tensor& image);
  const StyleCache& style_inversions(const PairSample& pair);

  TrainConfig config_;
  std::shared_ptr<const Backbone> backbone_;
  std::vector<torch::Tensor> contents_;
  std::vector<torch::Tensor> styles_;
  std::shared_ptr<StyleEncoder> encoder_;
  HijackSet hijack_;
  Stylizer stylizer_;
  Stylizer identity_stylizer_;
  LossModules modules_;
  std::unique_ptr<AccumulatingOptimizer> generator_opt_;
  std::unique_ptr<AccumulatingOptimizer> discriminator_opt_;
  std::vector<ContrastiveSample> bank_;
  std::map<int, StyleCache> style_cache_;
  int64_t step_ = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> records;
  std::filesystem::path log_path;
};

// Loads backbone and corpora, resumes if asked, runs to max_steps, writing
// <output>/loss_log.jsonl, <output>/checkpoints/step_NNNNNNNN and <output>/final.
TrainResult train(const TrainConfig& config, std::ostream* progress = nullptr);

}  // namespace diffnst
