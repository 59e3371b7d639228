#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "diffnst/backbone.hpp"

namespace diffnst {

// Predicted noises recorded while inverting an image, indexed by sampling
// step in generation order (the order reverse() consumes them).
struct NoiseTrace {
  std::vector<torch::Tensor> noises;
  torch::Tensor origin_latent;
  std::string config_fingerprint;

  int steps() const { return static_cast<int>(noises.size()); }

  void save(const std::filesystem::path& dir) const;
  static NoiseTrace load(const std::filesystem::path& dir);
};

// V values keyed by (site_id, sampling step).
class AttentionTrace {
 public:
  using Key = std::pair<std::string, int>;

  AttentionTrace() = default;
  AttentionTrace(std::string source_fingerprint, int steps) : source_fingerprint_(std::move(source_fingerprint)), steps_(steps) {}

  void insert(const std::string& site_id, int step, torch::Tensor v);
  bool contains(const std::string& site_id, int step) const;
  // Throws TraceError when the entry is missing.
  const torch::Tensor& at(const std::string& site_id, int step) const;

  const std::map<Key, torch::Tensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const std::string& source_fingerprint() const { return source_fingerprint_; }
  int steps() const { return steps_; }
  // Throws TraceError unless every (site, step) with step in [0, steps) is present.
  void require_complete(const std::vector<AttentionSite>& sites) const;
  bool same_grid(const AttentionTrace& other) const;

  void save(const std::filesystem::path& dir) const;
  static AttentionTrace load(const std::filesystem::path& dir);

 private:
  std::map<Key, torch::Tensor> entries_;
  std::string source_fingerprint_;
  int steps_ = 0;
};

// Steps [start_step, end_step) take their noise from a recorded trace.
struct InjectionWindow {
  int start_step = 5;
  int end_step = 45;

  bool contains(int step) const { return step >= start_step && step < end_step; }
  void validate(int steps) const;
  // The 5..45-of-50 operating point rescaled to `steps` sampling steps.
  static InjectionWindow scaled_default(int steps);
  static InjectionWindow full(int steps) { return {0, steps}; }
};

struct AttentionPolicy {
  enum class Mode { kNone, kRecord, kReplace };
  using ReplaceFn = std::function<torch::Tensor(const AttentionSite&, int step, const torch::Tensor& content_v)>;

  Mode mode = Mode::kNone;
  ReplaceFn replace_fn;
  // Replacement fires only for steps < stop_step; negative means every step.
  int stop_step = -1;
  // Sites that reach replace_fn; empty means all sites.
  std::vector<std::string> sites;
  // In replace mode, also record the post-replacement V values.
  bool record_replaced = false;

  static AttentionPolicy none() { return {}; }
  static AttentionPolicy record();
  static AttentionPolicy replace(ReplaceFn fn, int stop_step = -1, std::vector<std::string> sites = {});

  void validate(int steps) const;
};

struct InversionResult {
  NoiseTrace noise;
  torch::Tensor terminal;
  std::optional<AttentionTrace> attention;
};

struct ReverseResult {
  torch::Tensor latent;
  std::optional<AttentionTrace> attention;
};

// Deterministic DDIM (eta = 0) in both directions.
class Sampler {
 public:
  Sampler(std::shared_ptr<const NoisePredictor> model, DiffusionSchedule schedule);
  // Uses the backbone's own schedule, optionally with a different step count.
  explicit Sampler(std::shared_ptr<const Backbone> backbone, int steps = 0);

  int steps() const { return schedule_.steps(); }
  const DiffusionSchedule& schedule() const { return schedule_; }
  // Backbone fingerprint combined with the step count.
  std::string trace_fingerprint() const;

  InversionResult invert(const torch::Tensor& latent, const AttentionPolicy& policy = {}) const;

  // Without a trace every step uses the live prediction. With one, steps in
  // the window use the recorded noise verbatim and skip the model.
  ReverseResult reverse(const torch::Tensor& init, const NoiseTrace* trace, const InjectionWindow& window,
                        const AttentionPolicy& policy = {}) const;

  ReverseResult generate(uint64_t seed, const AttentionPolicy& policy = {}) const;

  // Initial noise used by generate().
  torch::Tensor initial_noise(uint64_t seed) const;

 private:
  HookSet make_hooks(const AttentionPolicy& policy, AttentionTrace* sink) const;

  std::shared_ptr<const NoisePredictor> model_;
  DiffusionSchedule schedule_;
};

}  // namespace diffnst
