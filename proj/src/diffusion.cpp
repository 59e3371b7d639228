#include "diffnst/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "diffnst/error.hpp"
#include "diffnst/random.hpp"
#include "diffnst/tensor_io.hpp"

namespace diffnst {

// ---------------------------------------------------------------------------
// Traces

void NoiseTrace::save(const std::filesystem::path& dir) const {
  NamedTensors tensors;
  tensors.emplace_back("origin_latent", origin_latent);
  for (int s = 0; s < steps(); ++s) tensors.emplace_back("step." + std::to_string(s), noises[static_cast<std::size_t>(s)]);
  nlohmann::json meta = {
      {"steps", steps()},
      {"shape", noises.empty() ? std::vector<int64_t>{} : noises.front().sizes().vec()},
      {"fingerprint", config_fingerprint},
  };
  save_tensor_dir(dir, "noise-trace", meta, tensors);
}

NoiseTrace NoiseTrace::load(const std::filesystem::path& dir) {
  auto stored = load_tensor_dir(dir, "noise-trace");
  NoiseTrace trace;
  trace.config_fingerprint = stored.meta.at("fingerprint").get<std::string>();
  trace.origin_latent = stored.at("origin_latent");
  const int steps = stored.meta.at("steps").get<int>();
  for (int s = 0; s < steps; ++s) trace.noises.push_back(stored.at("step." + std::to_string(s)));
  return trace;
}

void AttentionTrace::insert(const std::string& site_id, int step, torch::Tensor v) {
  entries_[{site_id, step}] = std::move(v);
}

bool AttentionTrace::contains(const std::string& site_id, int step) const {
  return entries_.count({site_id, step}) != 0;
}

const torch::Tensor& AttentionTrace::at(const std::string& site_id, int step) const {
  auto it = entries_.find({site_id, step});
  if (it == entries_.end()) {
    throw TraceError("attention trace has no entry for site " + site_id + " at step " + std::to_string(step));
  }
  return it->second;
}

void AttentionTrace::require_complete(const std::vector<AttentionSite>& sites) const {
  for (const auto& site : sites) {
    for (int s = 0; s < steps_; ++s) at(site.site_id, s);
  }
}

bool AttentionTrace::same_grid(const AttentionTrace& other) const {
  if (entries_.size() != other.entries_.size() || steps_ != other.steps_) return false;
  for (auto a = entries_.begin(), b = other.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.sizes() != b->second.sizes()) return false;
  }
  return true;
}

void AttentionTrace::save(const std::filesystem::path& dir) const {
  NamedTensors tensors;
  for (const auto& [key, v] : entries_) tensors.emplace_back(key.first + "@" + std::to_string(key.second), v);
  nlohmann::json meta = {{"steps", steps_}, {"fingerprint", source_fingerprint_}};
  save_tensor_dir(dir, "attention-trace", meta, tensors);
}

AttentionTrace AttentionTrace::load(const std::filesystem::path& dir) {
  auto stored = load_tensor_dir(dir, "attention-trace");
  AttentionTrace trace(stored.meta.at("fingerprint").get<std::string>(), stored.meta.at("steps").get<int>());
  for (auto& [name, tensor] : stored.tensors) {
    const auto at_sign = name.rfind('@');
    if (at_sign == std::string::npos) throw IoError("malformed attention trace key '" + name + "'");
    trace.insert(name.substr(0, at_sign), std::stoi(name.substr(at_sign + 1)), tensor);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Window and policy

void InjectionWindow::validate(int steps) const {
  if (!(0 <= start_step && start_step < end_step && end_step <= steps)) {
    throw ConfigError("injection window [" + std::to_string(start_step) + ", " + std::to_string(end_step) +
                      ") invalid for " + std::to_string(steps) + " sampling steps");
  }
}

InjectionWindow InjectionWindow::scaled_default(int steps) {
  const int margin = static_cast<int>(std::lround(0.1 * steps));
  return {margin, steps - margin};
}

AttentionPolicy AttentionPolicy::record() {
  AttentionPolicy p;
  p.mode = Mode::kRecord;
  return p;
}

AttentionPolicy AttentionPolicy::replace(ReplaceFn fn, int stop_step, std::vector<std::string> sites) {
  AttentionPolicy p;
  p.mode = Mode::kReplace;
  p.replace_fn = std::move(fn);
  p.stop_step = stop_step;
  p.sites = std::move(sites);
  return p;
}

void AttentionPolicy::validate(int steps) const {
  if ((mode == Mode::kReplace) != static_cast<bool>(replace_fn)) {
    throw ConfigError("attention policy: replace_fn is required exactly when mode is replace");
  }
  if (stop_step > steps) throw ConfigError("attention policy: stop_step exceeds the number of sampling steps");
}

// ---------------------------------------------------------------------------
// Sampler

Sampler::Sampler(std::shared_ptr<const NoisePredictor> model, DiffusionSchedule schedule)
    : model_(std::move(model)), schedule_(std::move(schedule)) {
  if (!model_) throw ConfigError("sampler needs a noise predictor");
  if (schedule_.train_timesteps() != model_->train_timesteps()) {
    throw ConfigError("schedule and model disagree on train_timesteps");
  }
}

Sampler::Sampler(std::shared_ptr<const Backbone> backbone, int steps)
    : Sampler(backbone, steps > 0 ? backbone->schedule_with_steps(steps) : backbone->schedule()) {}

std::string Sampler::trace_fingerprint() const {
  Fnv1a hash;
  hash.update(model_->fingerprint());
  const int steps = schedule_.steps();
  hash.update(&steps, sizeof(steps));
  return hash.hex();
}

HookSet Sampler::make_hooks(const AttentionPolicy& policy, AttentionTrace* sink) const {
  HookSet hooks;
  const auto& sites = model_->enumerate_attention_sites();
  for (const auto& site : sites) {
    AttentionHook hook;
    if (policy.mode == AttentionPolicy::Mode::kRecord) {
      hook.observe = [sink](const AttentionSite& s, int step, const torch::Tensor&, const torch::Tensor&,
                            const torch::Tensor& v) { sink->insert(s.site_id, step, v.detach().clone()); };
    }
    const bool selected = policy.sites.empty() ||
                          std::find(policy.sites.begin(), policy.sites.end(), site.site_id) != policy.sites.end();
    if (policy.mode == AttentionPolicy::Mode::kReplace && selected) {
      hook.replace_v = [&policy, sink](const AttentionSite& s, int step, const torch::Tensor& v) -> torch::Tensor {
        if (policy.stop_step >= 0 && step >= policy.stop_step) return v;
        auto out = policy.replace_fn(s, step, v);
        if (policy.record_replaced) sink->insert(s.site_id, step, out.detach().clone());
        return out;
      };
    }
    if (hook.observe || hook.replace_v) hooks.set(site.site_id, std::move(hook));
  }
  return hooks;
}

InversionResult Sampler::invert(const torch::Tensor& latent, const AttentionPolicy& policy) const {
  if (policy.mode == AttentionPolicy::Mode::kReplace) throw ConfigError("invert accepts only none/record policies");
  policy.validate(steps());
  const auto expected = model_->latent_shape();
  if (latent.sizes().vec() != expected && !(latent.dim() == 4 && latent.sizes().slice(1).vec() == expected)) {
    throw ConfigError("latent shape does not match the backbone");
  }

  InversionResult result;
  result.noise.config_fingerprint = trace_fingerprint();
  result.noise.origin_latent = latent.detach().clone();
  result.noise.noises.resize(static_cast<std::size_t>(steps()));
  std::optional<AttentionTrace> trace;
  if (policy.mode == AttentionPolicy::Mode::kRecord) trace.emplace(trace_fingerprint(), steps());
  const auto hooks = make_hooks(policy, trace ? &*trace : nullptr);

  auto x = latent.to(torch::kFloat64);
  for (int s = steps() - 1; s >= 0; --s) {
    const double a = schedule_.alpha_bar_at(s);
    const double a_prev = schedule_.alpha_bar_after(s);
    auto eps = model_->predict_noise_at(x.to(torch::kFloat32), schedule_.timestep_at(s), hooks.empty() ? nullptr : &hooks, s);
    x = std::sqrt(a) * (x - std::sqrt(1.0 - a_prev) * eps) / std::sqrt(a_prev) + std::sqrt(1.0 - a) * eps;
    result.noise.noises[static_cast<std::size_t>(s)] = eps.detach();
  }
  result.terminal = x.to(torch::kFloat32);
  result.attention = std::move(trace);
  return result;
}

ReverseResult Sampler::reverse(const torch::Tensor& init, const NoiseTrace* trace, const InjectionWindow& window,
                               const AttentionPolicy& policy) const {
  policy.validate(steps());
  if (trace) {
    window.validate(steps());
    if (trace->config_fingerprint != trace_fingerprint() || trace->steps() != steps()) {
      throw TraceError("noise trace was produced by a different backbone or schedule");
    }
    if (trace->noises.front().sizes() != init.sizes()) throw TraceError("noise trace shape does not match init");
  }
  const auto expected = model_->latent_shape();
  if (init.sizes().vec() != expected && !(init.dim() == 4 && init.sizes().slice(1).vec() == expected)) {
    throw ConfigError("init latent shape does not match the backbone");
  }

  std::optional<AttentionTrace> recorded;
  if (policy.mode == AttentionPolicy::Mode::kRecord || policy.record_replaced) recorded.emplace(trace_fingerprint(), steps());
  const auto hooks = make_hooks(policy, recorded ? &*recorded : nullptr);

  auto x = init.to(torch::kFloat64);
  for (int s = 0; s < steps(); ++s) {
    const double a = schedule_.alpha_bar_at(s);
    const double a_next = schedule_.alpha_bar_after(s);
    torch::Tensor eps;
    if (trace && window.contains(s)) {
      eps = trace->noises[static_cast<std::size_t>(s)];
    } else {
      eps = model_->predict_noise_at(x.to(torch::kFloat32), schedule_.timestep_at(s), hooks.empty() ? nullptr : &hooks, s);
    }
    auto x0 = (x - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
    x = std::sqrt(a_next) * x0 + std::sqrt(1.0 - a_next) * eps;
  }
  return {x.to(torch::kFloat32), std::move(recorded)};
}

torch::Tensor Sampler::initial_noise(uint64_t seed) const { return seeded_randn(model_->latent_shape(), seed); }

ReverseResult Sampler::generate(uint64_t seed, const AttentionPolicy& policy) const {
  return reverse(initial_noise(seed), nullptr, InjectionWindow::full(steps()), policy);
}

}  // namespace diffnst
