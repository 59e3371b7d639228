#include "diffnst/style_embed.hpp"

#include <cmath>

#include "diffnst/error.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

StyleCode StyleEncoder::encode(const torch::Tensor& image) const {
  torch::NoGradGuard no_grad;
  if (image.dim() != 3) throw ConfigError("encode expects a single [3,H,W] image");
  auto values = encode_values(image.unsqueeze(0)).squeeze(0).detach().clone();
  if (!torch::isfinite(values).all().item<bool>()) throw EncoderError("encoder " + id() + " produced non-finite code");
  return {values, id()};
}

void require_same_encoder(const std::vector<const StyleCode*>& codes) {
  if (codes.empty()) return;
  const auto& first = *codes.front();
  for (const auto* code : codes) {
    if (code->encoder_id != first.encoder_id) {
      throw EncoderError("style codes from different encoders mixed: '" + first.encoder_id + "' and '" +
                         code->encoder_id + "'");
    }
    if (code->dim() != first.dim()) throw EncoderError("style codes of different dimension mixed");
  }
}

StatsStyleEncoder::StatsStyleEncoder(std::shared_ptr<const FeatureExtractor> extractor, int stat_dim, int dim,
                                     uint64_t seed, bool trainable)
    : extractor_(std::move(extractor)), stat_dim_(stat_dim), dim_(dim), seed_(seed), trainable_(trainable) {
  if (!extractor_) throw ConfigError("stats encoder needs a feature extractor");
  if (stat_dim_ < 1 || dim_ < 1) throw ConfigError("stats encoder dimensions must be positive");
  weight_ = seeded_randn({dim_, stat_dim_}, mix_seed(seed_, 0)) / std::sqrt(static_cast<double>(stat_dim_));
  bias_ = torch::zeros({dim_});
  weight_.set_requires_grad(trainable_);
  bias_.set_requires_grad(trainable_);
}

std::string StatsStyleEncoder::id() const {
  return std::string(kStatsEncoderName) + ":" + std::to_string(dim_) + ":" + std::to_string(seed_) + "@" +
         extractor_->id();
}

torch::Tensor StatsStyleEncoder::statistics(const torch::Tensor& images) const {
  std::vector<torch::Tensor> parts;
  for (const auto& f : extractor_->features(as_batch(images))) {
    auto [mean, std] = channel_stats(f);
    parts.push_back(mean);
    parts.push_back(std);
  }
  auto stats = torch::cat(parts, 1);
  if (stats.size(1) != stat_dim_) {
    throw ConfigError("extractor yields " + std::to_string(stats.size(1)) + " statistics, encoder expects " +
                      std::to_string(stat_dim_));
  }
  return stats;
}

torch::Tensor StatsStyleEncoder::encode_values(const torch::Tensor& images) const {
  auto stats = statistics(images);
  return torch::nn::functional::linear(stats, weight_.to(stats.dtype()), bias_.to(stats.dtype()));
}

std::vector<torch::Tensor> StatsStyleEncoder::parameters() const {
  if (!trainable_) return {};
  return {weight_, bias_};
}

NamedTensors StatsStyleEncoder::named_state() const { return {{"weight", weight_}, {"bias", bias_}}; }

void StatsStyleEncoder::load_state(const NamedTensors& state) {
  for (const auto& [name, value] : state) {
    torch::NoGradGuard no_grad;
    auto& target = name == "weight" ? weight_ : name == "bias" ? bias_ : throw EncoderError("unknown encoder tensor " + name);
    if (target.sizes() != value.sizes()) throw EncoderError("encoder tensor " + name + " has the wrong shape");
    target.copy_(value);
  }
}

std::shared_ptr<StatsStyleEncoder> make_stats_encoder(int dim, bool trainable) {
  auto extractor = default_extractor();
  int stat_dim = 0;
  {
    torch::NoGradGuard no_grad;
    for (const auto& f : extractor->features(torch::zeros({1, 3, 8, 8}))) stat_dim += 2 * static_cast<int>(f.size(1));
  }
  return std::make_shared<StatsStyleEncoder>(extractor, stat_dim, dim, 99, trainable);
}

void EncoderRegistry::add(std::shared_ptr<StyleEncoder> encoder) {
  if (!encoder) throw EncoderError("cannot register a null encoder");
  const auto id = encoder->id();
  if (!encoders_.emplace(id, std::move(encoder)).second) throw EncoderError("encoder already registered: " + id);
}

std::shared_ptr<StyleEncoder> EncoderRegistry::get(const std::string& id) const {
  auto it = encoders_.find(id);
  if (it != encoders_.end()) return it->second;
  // Short names match on the id prefix before the first ':'.
  std::shared_ptr<StyleEncoder> match;
  for (const auto& [key, enc] : encoders_) {
    if (key.substr(0, key.find(':')) == id) {
      if (match) throw EncoderError("encoder name is ambiguous: " + id);
      match = enc;
    }
  }
  if (!match) throw EncoderError("unknown style encoder: " + id);
  return match;
}

std::vector<std::string> EncoderRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [key, _] : encoders_) out.push_back(key);
  return out;
}

EncoderRegistry EncoderRegistry::with_defaults(int dim, bool trainable) {
  EncoderRegistry registry;
  registry.add(make_stats_encoder(dim, trainable));
  return registry;
}

}  // namespace diffnst
