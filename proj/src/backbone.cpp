#include "diffnst/backbone.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "diffnst/error.hpp"

namespace diffnst {

namespace nn = torch::nn;

// ---------------------------------------------------------------------------
// Config

std::vector<int> BackboneConfig::v_dim_per_site() const {
  std::vector<int> dims;
  for (int w : unet_channel_widths) dims.push_back(w);
  dims.push_back(unet_channel_widths.back());
  for (int l = levels() - 1; l >= 0; --l) dims.push_back(unet_channel_widths[static_cast<std::size_t>(l)]);
  return dims;
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid backbone config: " + what); };
  if (image_size <= 0 || image_size > 128) fail("image_size must be in (0, 128]");
  if (latent_channels <= 0) fail("latent_channels must be positive");
  if (downsample_factor <= 0 || (downsample_factor & (downsample_factor - 1)) != 0) {
    fail("downsample_factor must be a power of two");
  }
  if (unet_channel_widths.empty()) fail("unet_channel_widths is empty");
  if (image_size % downsample_factor != 0) fail("image_size not divisible by downsample_factor");
  const int level_factor = 1 << (levels() - 1);
  if (image_size % (downsample_factor * level_factor) != 0) {
    fail("image_size not divisible by downsample_factor * 2^(levels-1)");
  }
  for (int w : unet_channel_widths) {
    if (w <= 0 || w % 8 != 0) fail("unet channel widths must be positive multiples of 8");
    if (attention_head_count <= 0 || w % attention_head_count != 0) {
      fail("every unet width must be divisible by attention_head_count");
    }
  }
  if (train_timesteps <= 0) fail("train_timesteps must be positive");
  if (sampling_steps <= 0 || sampling_steps > train_timesteps) fail("sampling_steps must be in [1, train_timesteps]");
}

nlohmann::json BackboneConfig::to_json() const {
  return {
      {"image_size", image_size},
      {"latent_channels", latent_channels},
      {"downsample_factor", downsample_factor},
      {"unet_channel_widths", unet_channel_widths},
      {"attention_head_count", attention_head_count},
      {"v_dim_per_site", v_dim_per_site()},
      {"train_timesteps", train_timesteps},
      {"sampling_steps", sampling_steps},
  };
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
  c.unet_channel_widths = j.value("unet_channel_widths", c.unet_channel_widths);
  c.attention_head_count = j.value("attention_head_count", c.attention_head_count);
  c.train_timesteps = j.value("train_timesteps", c.train_timesteps);
  c.sampling_steps = j.value("sampling_steps", c.sampling_steps);
  c.validate();
  if (j.contains("v_dim_per_site") && j.at("v_dim_per_site").get<std::vector<int>>() != c.v_dim_per_site()) {
    throw ConfigError("v_dim_per_site disagrees with unet_channel_widths");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Schedule

DiffusionSchedule DiffusionSchedule::linear(int train_timesteps, int sampling_steps, double beta_start,
                                            double beta_end) {
  if (train_timesteps <= 1 || sampling_steps <= 0 || sampling_steps > train_timesteps) {
    throw ConfigError("schedule needs 1 <= sampling_steps <= train_timesteps");
  }
  DiffusionSchedule s;
  s.betas_.resize(static_cast<std::size_t>(train_timesteps));
  s.alpha_bars_.resize(s.betas_.size());
  double running = 1.0;
  for (int t = 0; t < train_timesteps; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * t / (train_timesteps - 1);
    running *= 1.0 - beta;
    s.betas_[static_cast<std::size_t>(t)] = beta;
    s.alpha_bars_[static_cast<std::size_t>(t)] = running;
  }
  for (int i = 0; i < sampling_steps; ++i) {
    s.sampling_indices_.push_back(static_cast<int64_t>(i) * train_timesteps / sampling_steps);
  }
  for (std::size_t i = 1; i < s.alpha_bars_.size(); ++i) {
    if (!(s.alpha_bars_[i] < s.alpha_bars_[i - 1])) throw ConfigError("alpha_bars not strictly decreasing");
  }
  for (std::size_t i = 1; i < s.sampling_indices_.size(); ++i) {
    if (s.sampling_indices_[i] <= s.sampling_indices_[i - 1]) {
      throw ConfigError("sampling indices not strictly increasing");
    }
  }
  return s;
}

int64_t DiffusionSchedule::timestep_at(int step) const {
  if (step < 0 || step >= steps()) throw ConfigError("sampling step " + std::to_string(step) + " out of range");
  return sampling_indices_[static_cast<std::size_t>(steps() - 1 - step)];
}

double DiffusionSchedule::alpha_bar_at(int step) const {
  return alpha_bars_[static_cast<std::size_t>(timestep_at(step))];
}

double DiffusionSchedule::alpha_bar_after(int step) const {
  if (step == steps() - 1) return 1.0;
  return alpha_bar_at(step + 1);
}

// ---------------------------------------------------------------------------
// Hooks

std::string to_string(Half half) {
  switch (half) {
    case Half::kEncoderDown:
      return "encoder-down";
    case Half::kMid:
      return "mid";
    case Half::kDecoderUp:
      return "decoder-up";
  }
  return "unknown";
}

HookSet& HookSet::set(const std::string& site_id, AttentionHook hook) {
  hooks_[site_id] = std::move(hook);
  return *this;
}

HookSet& HookSet::set_all(const std::vector<AttentionSite>& sites, const AttentionHook& hook) {
  for (const auto& s : sites) hooks_[s.site_id] = hook;
  return *this;
}

const AttentionHook* HookSet::find(const std::string& site_id) const {
  auto it = hooks_.find(site_id);
  return it == hooks_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Networks

namespace nets {

namespace {

int groups_for(int channels) { return channels % 8 == 0 ? 8 : 1; }

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int time_dim) {
  norm1_ = register_module("norm1", nn::GroupNorm(groups_for(in_channels), in_channels));
  conv1_ = register_module("conv1", conv3x3(in_channels, out_channels));
  time_proj_ = register_module("time_proj", nn::Linear(time_dim, out_channels));
  norm2_ = register_module("norm2", nn::GroupNorm(groups_for(out_channels), out_channels));
  conv2_ = register_module("conv2", conv3x3(out_channels, out_channels));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_embedding) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_proj_(torch::silu(time_embedding)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

SelfAttentionImpl::SelfAttentionImpl(AttentionSite site, int heads) : site_(std::move(site)), heads_(heads) {
  const int c = site_.v_dim;
  norm_ = register_module("norm", nn::GroupNorm(groups_for(c), c));
  q_ = register_module("q", nn::Linear(c, c));
  k_ = register_module("k", nn::Linear(c, c));
  v_ = register_module("v", nn::Linear(c, c));
  out_ = register_module("out", nn::Linear(c, c));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x, const HookContext& ctx) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = norm_(x).flatten(2).transpose(1, 2);  // [B, N, C]
  auto q = q_(tokens);
  auto k = k_(tokens);
  auto v = v_(tokens);

  if (const AttentionHook* hook = ctx.hooks ? ctx.hooks->find(site_.site_id) : nullptr) {
    if (hook->observe) hook->observe(site_, ctx.step, q, k, v);
    if (hook->replace_v) {
      auto replaced = hook->replace_v(site_, ctx.step, v);
      if (!replaced.defined() || replaced.sizes() != v.sizes()) {
        throw HookError("replace_v at " + site_.site_id + " returned a tensor of the wrong shape");
      }
      v = std::move(replaced);
    }
  }

  const auto n = tokens.size(1);
  const auto d = c / heads_;
  auto split = [&](const torch::Tensor& t) { return t.reshape({b, n, heads_, d}).transpose(1, 2); };
  auto scores = torch::matmul(split(q), split(k).transpose(-2, -1)) / std::sqrt(static_cast<double>(d));
  auto mixed = torch::matmul(torch::softmax(scores, -1), split(v));
  mixed = mixed.transpose(1, 2).reshape({b, n, c});
  auto out = out_(mixed).transpose(1, 2).reshape({b, c, h, w});
  return x + out;
}

UNetImpl::UNetImpl(const BackboneConfig& config, const std::vector<AttentionSite>& sites)
    : base_width_(config.unet_channel_widths.front()) {
  const auto& widths = config.unet_channel_widths;
  const int levels = config.levels();
  const int time_dim = 4 * base_width_;
  const int heads = config.attention_head_count;

  conv_in_ = register_module("conv_in", conv3x3(config.latent_channels, widths[0]));
  time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(base_width_, time_dim), nn::SiLU(),
                                                         nn::Linear(time_dim, time_dim)));
  down_res_ = register_module("down_res", nn::ModuleList());
  down_attn_ = register_module("down_attn", nn::ModuleList());
  downsample_ = register_module("downsample", nn::ModuleList());
  up_res_ = register_module("up_res", nn::ModuleList());
  up_attn_ = register_module("up_attn", nn::ModuleList());
  upsample_conv_ = register_module("upsample_conv", nn::ModuleList());

  std::size_t site_index = 0;
  int prev = widths[0];
  for (int l = 0; l < levels; ++l) {
    const int w = widths[static_cast<std::size_t>(l)];
    down_res_->push_back(ResBlock(prev, w, time_dim));
    down_attn_->push_back(SelfAttention(sites[site_index++], heads));
    if (l + 1 < levels) downsample_->push_back(conv3x3(w, w, 2));
    prev = w;
  }
  mid_res1_ = register_module("mid_res1", ResBlock(prev, prev, time_dim));
  mid_attn_ = register_module("mid_attn", SelfAttention(sites[site_index++], heads));
  mid_res2_ = register_module("mid_res2", ResBlock(prev, prev, time_dim));
  for (int l = levels - 1; l >= 0; --l) {
    const int w = widths[static_cast<std::size_t>(l)];
    up_res_->push_back(ResBlock(2 * w, w, time_dim));
    up_attn_->push_back(SelfAttention(sites[site_index++], heads));
    if (l > 0) upsample_conv_->push_back(conv3x3(w, widths[static_cast<std::size_t>(l - 1)]));
  }
  norm_out_ = register_module("norm_out", nn::GroupNorm(groups_for(widths[0]), widths[0]));
  conv_out_ = register_module("conv_out", conv3x3(widths[0], config.latent_channels));
}

torch::Tensor UNetImpl::embed_time(const torch::Tensor& timesteps) const {
  const int half = base_width_ / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = timesteps.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& latent, const torch::Tensor& timesteps, const HookContext& ctx) {
  auto temb = time_mlp_->forward(embed_time(timesteps));
  auto h = conv_in_(latent);
  std::vector<torch::Tensor> skips;
  const auto levels = down_res_->size();
  for (std::size_t l = 0; l < levels; ++l) {
    h = down_res_[l]->as<ResBlock>()->forward(h, temb);
    h = down_attn_[l]->as<SelfAttention>()->forward(h, ctx);
    skips.push_back(h);
    if (l + 1 < levels) h = downsample_[l]->as<nn::Conv2d>()->forward(h);
  }
  h = mid_res1_(h, temb);
  h = mid_attn_(h, ctx);
  h = mid_res2_(h, temb);
  for (std::size_t i = 0; i < levels; ++i) {
    h = torch::cat({h, skips[levels - 1 - i]}, 1);
    h = up_res_[i]->as<ResBlock>()->forward(h, temb);
    h = up_attn_[i]->as<SelfAttention>()->forward(h, ctx);
    if (i + 1 < levels) {
      h = torch::upsample_nearest2d(h, {h.size(2) * 2, h.size(3) * 2});
      h = upsample_conv_[i]->as<nn::Conv2d>()->forward(h);
    }
  }
  return conv_out_(torch::silu(norm_out_(h)));
}

AutoencoderImpl::AutoencoderImpl(const BackboneConfig& config) {
  int stages = 0;
  for (int f = config.downsample_factor; f > 1; f /= 2) ++stages;
  auto width_at = [](int stage) { return stage == 0 ? 32 : 64; };

  nn::Sequential enc;
  enc->push_back(conv3x3(3, width_at(0)));
  enc->push_back(nn::SiLU());
  enc->push_back(conv3x3(width_at(0), width_at(0)));
  enc->push_back(nn::SiLU());
  for (int s = 1; s <= stages; ++s) {
    enc->push_back(conv3x3(width_at(s - 1), width_at(s), 2));
    enc->push_back(nn::SiLU());
    enc->push_back(conv3x3(width_at(s), width_at(s)));
    enc->push_back(nn::SiLU());
  }
  enc->push_back(conv3x3(width_at(stages), config.latent_channels));

  nn::Sequential dec;
  dec->push_back(conv3x3(config.latent_channels, width_at(stages)));
  dec->push_back(nn::SiLU());
  dec->push_back(conv3x3(width_at(stages), width_at(stages)));
  dec->push_back(nn::SiLU());
  for (int s = stages; s >= 1; --s) {
    dec->push_back(nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    dec->push_back(conv3x3(width_at(s), width_at(s - 1)));
    dec->push_back(nn::SiLU());
  }
  dec->push_back(conv3x3(width_at(0), width_at(0)));
  dec->push_back(nn::SiLU());
  dec->push_back(conv3x3(width_at(0), 3));
  dec->push_back(nn::Sigmoid());

  encoder_ = register_module("encoder", enc);
  decoder_ = register_module("decoder", dec);
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& images) { return encoder_->forward(images); }

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& latents) { return decoder_->forward(latents); }

}  // namespace nets

// ---------------------------------------------------------------------------
// Backbone

namespace {

std::vector<AttentionSite> make_sites(const BackboneConfig& config) {
  std::vector<AttentionSite> sites;
  const int levels = config.levels();
  auto add = [&](Half half, int level, const std::string& prefix) {
    AttentionSite s;
    s.half = half;
    s.level = level;
    s.block = 0;
    const int side = config.latent_size() >> level;
    s.token_count = side * side;
    s.v_dim = config.unet_channel_widths[static_cast<std::size_t>(level)];
    s.index = static_cast<int>(sites.size());
    s.site_id = prefix + ".l" + std::to_string(level) + ".b0";
    sites.push_back(std::move(s));
  };
  for (int l = 0; l < levels; ++l) add(Half::kEncoderDown, l, "down");
  add(Half::kMid, levels - 1, "mid");
  for (int l = levels - 1; l >= 0; --l) add(Half::kDecoderUp, l, "up");
  return sites;
}

}  // namespace

Backbone::Backbone(BackboneConfig config, uint64_t seed)
    : config_(std::move(config)),
      schedule_((config_.validate(), DiffusionSchedule::linear(config_.train_timesteps, config_.sampling_steps))),
      sites_(make_sites(config_)) {
  torch::manual_seed(seed);
  autoencoder_ = nets::Autoencoder(config_);
  unet_ = nets::UNet(config_, sites_);
}

DiffusionSchedule Backbone::schedule_with_steps(int sampling_steps) const {
  return DiffusionSchedule::linear(config_.train_timesteps, sampling_steps);
}

void Backbone::check_image(const torch::Tensor& image) const {
  const bool batched = image.dim() == 4;
  if (!(image.dim() == 3 || batched)) throw ConfigError("image must be [3,H,W] or [B,3,H,W]");
  const auto c = image.size(batched ? 1 : 0);
  const auto h = image.size(batched ? 2 : 1);
  const auto w = image.size(batched ? 3 : 2);
  if (c != 3 || h != config_.image_size || w != config_.image_size) {
    std::ostringstream msg;
    msg << "image shape " << image.sizes() << " does not match backbone image_size " << config_.image_size;
    throw ConfigError(msg.str());
  }
}

void Backbone::check_latent(const torch::Tensor& latent) const {
  const bool batched = latent.dim() == 4;
  if (!(latent.dim() == 3 || batched)) throw ConfigError("latent must be [C,h,w] or [B,C,h,w]");
  const auto c = latent.size(batched ? 1 : 0);
  const auto h = latent.size(batched ? 2 : 1);
  const auto w = latent.size(batched ? 3 : 2);
  if (c != config_.latent_channels || h != config_.latent_size() || w != config_.latent_size()) {
    std::ostringstream msg;
    msg << "latent shape " << latent.sizes() << " does not match backbone latent " << config_.latent_channels << "x"
        << config_.latent_size() << "x" << config_.latent_size();
    throw ConfigError(msg.str());
  }
}

void Backbone::check_hooks(const HookSet& hooks) const {
  for (const auto& [id, hook] : hooks.hooks()) {
    bool known = false;
    for (const auto& s : sites_) known = known || s.site_id == id;
    if (!known) throw HookError("hook registered for unknown attention site '" + id + "'");
  }
}

torch::Tensor Backbone::encode(const torch::Tensor& image) const {
  check_image(image);
  const bool batched = image.dim() == 4;
  auto x = batched ? image : image.unsqueeze(0);
  auto z = autoencoder_.ptr()->encode(x.to(torch::kFloat32) * 2.0 - 1.0) * latent_scale_;
  return batched ? z : z.squeeze(0);
}

torch::Tensor Backbone::decode(const torch::Tensor& latent) const {
  check_latent(latent);
  const bool batched = latent.dim() == 4;
  auto z = batched ? latent : latent.unsqueeze(0);
  auto x = autoencoder_.ptr()->decode(z / latent_scale_);
  return batched ? x : x.squeeze(0);
}

torch::Tensor Backbone::predict_noise_at(const torch::Tensor& latent, int64_t timestep, const HookSet* hooks,
                                         int step) const {
  check_latent(latent);
  if (timestep < 0 || timestep >= config_.train_timesteps) throw ConfigError("timestep out of range");
  if (hooks) check_hooks(*hooks);
  const bool batched = latent.dim() == 4;
  auto z = batched ? latent : latent.unsqueeze(0);
  auto t = torch::full({z.size(0)}, static_cast<float>(timestep), torch::kFloat32);
  auto eps = unet_.ptr()->forward(z, t, HookContext{hooks, step});
  return batched ? eps : eps.squeeze(0);
}

torch::Tensor Backbone::predict_noise(const torch::Tensor& latent, int step, const HookSet* hooks) const {
  return predict_noise_at(latent, schedule_.timestep_at(step), hooks, step);
}

std::vector<AttentionSite> Backbone::sites_in(Half half) const {
  std::vector<AttentionSite> out;
  for (const auto& s : sites_) {
    if (s.half == half) out.push_back(s);
  }
  return out;
}

const AttentionSite& Backbone::site(const std::string& site_id) const {
  for (const auto& s : sites_) {
    if (s.site_id == site_id) return s;
  }
  throw HookError("unknown attention site '" + site_id + "'");
}

std::vector<torch::Tensor> Backbone::parameters() const {
  auto params = autoencoder_->parameters();
  auto unet_params = unet_->parameters();
  params.insert(params.end(), unet_params.begin(), unet_params.end());
  return params;
}

NamedTensors Backbone::named_state() const {
  NamedTensors out;
  for (const auto& p : autoencoder_->named_parameters()) out.emplace_back("autoencoder." + p.key(), p.value());
  for (const auto& p : unet_->named_parameters()) out.emplace_back("unet." + p.key(), p.value());
  return out;
}

void Backbone::set_latent_scale(float scale) {
  if (frozen_) throw ConfigError("backbone is frozen");
  if (!(scale > 0.0f) || !std::isfinite(scale)) throw ConfigError("latent scale must be positive and finite");
  latent_scale_ = scale;
}

void Backbone::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
  autoencoder_->eval();
  unet_->eval();
  frozen_ = true;
  fingerprint_cache_.clear();
}

std::string Backbone::parameter_checksum() const {
  Fnv1a hash;
  for (const auto& [name, tensor] : named_state()) {
    hash.update(name);
    hash.update(tensor);
  }
  return hash.hex();
}

std::string Backbone::fingerprint() const {
  if (frozen_ && !fingerprint_cache_.empty()) return fingerprint_cache_;
  Fnv1a hash;
  hash.update(config_.to_json().dump());
  hash.update(parameter_checksum());
  hash.update(&latent_scale_, sizeof(latent_scale_));
  auto fp = hash.hex();
  if (frozen_) fingerprint_cache_ = fp;
  return fp;
}

void Backbone::save(const std::filesystem::path& dir) const {
  nlohmann::json meta = {
      {"config", config_.to_json()},
      {"latent_scale", latent_scale_},
      {"fingerprint", fingerprint()},
  };
  save_tensor_dir(dir, "backbone", meta, named_state());
}

std::shared_ptr<Backbone> Backbone::load(const std::filesystem::path& dir) {
  auto stored = load_tensor_dir(dir, "backbone");
  auto config = BackboneConfig::from_json(stored.meta.at("config"));
  auto backbone = std::make_shared<Backbone>(config);
  {
    torch::NoGradGuard no_grad;
    for (auto& [name, tensor] : backbone->named_state()) {
      if (!stored.contains(name)) throw IoError("backbone checkpoint lacks parameter '" + name + "'");
      const auto& src = stored.at(name);
      if (src.sizes() != tensor.sizes()) throw IoError("shape mismatch for backbone parameter '" + name + "'");
      tensor.copy_(src);
    }
  }
  backbone->latent_scale_ = stored.meta.at("latent_scale").get<float>();
  backbone->freeze();
  const auto expected = stored.meta.value("fingerprint", "");
  if (!expected.empty() && expected != backbone->fingerprint()) {
    throw IoError("backbone checkpoint fingerprint mismatch in " + dir.string());
  }
  return backbone;
}

}  // namespace diffnst
