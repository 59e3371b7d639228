#include "diffnst/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include "diffnst/corpus.hpp"
#include "diffnst/error.hpp"
#include "diffnst/image_io.hpp"
#include "diffnst/imageops.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Pretraining

nlohmann::json PretrainConfig::to_json() const {
  return {{"backbone", backbone.to_json()},
          {"autoencoder_steps", autoencoder_steps},
          {"denoiser_steps", denoiser_steps},
          {"batch_size", batch_size},
          {"autoencoder_lr", autoencoder_lr},
          {"denoiser_lr", denoiser_lr},
          {"holdout", holdout},
          {"seed", seed},
          {"log_every", log_every}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  if (j.contains("backbone")) c.backbone = BackboneConfig::from_json(j.at("backbone"));
  c.autoencoder_steps = j.value("autoencoder_steps", c.autoencoder_steps);
  c.denoiser_steps = j.value("denoiser_steps", c.denoiser_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.autoencoder_lr = j.value("autoencoder_lr", c.autoencoder_lr);
  c.denoiser_lr = j.value("denoiser_lr", c.denoiser_lr);
  c.holdout = j.value("holdout", c.holdout);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

nlohmann::json PretrainReport::to_json() const {
  return {{"holdout_mae", holdout_mae},
          {"final_autoencoder_loss", final_autoencoder_loss},
          {"final_denoiser_loss", final_denoiser_loss},
          {"latent_scale", latent_scale},
          {"train_images", train_images},
          {"holdout_images", holdout_images}};
}

double reconstruction_mae(const Backbone& backbone, const std::vector<torch::Tensor>& images) {
  if (images.empty()) throw ConfigError("no images to measure");
  torch::NoGradGuard no_grad;
  double sum = 0.0;
  for (const auto& img : images) sum += (backbone.decode(backbone.encode(img)) - img).abs().mean().item<double>();
  return sum / static_cast<double>(images.size());
}

namespace {

// Cosine decay to 5% of the base rate.
double cosine_factor(int step, int total) {
  if (total <= 1) return 1.0;
  const double progress = static_cast<double>(step) / static_cast<double>(total - 1);
  return 0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

}  // namespace

std::shared_ptr<Backbone> pretrain_backbone(const std::vector<torch::Tensor>& images, const PretrainConfig& config,
                                            PretrainReport* report, std::ostream* log) {
  if (images.empty()) throw ConfigError("pretraining corpus is empty");
  if (config.batch_size < 1 || config.autoencoder_steps < 0 || config.denoiser_steps < 0) {
    throw ConfigError("pretraining steps and batch size must be non-negative");
  }
  config.backbone.validate();
  torch::manual_seed(config.seed);
  auto backbone = std::make_shared<Backbone>(config.backbone, config.seed);
  const int size = config.backbone.image_size;

  std::vector<torch::Tensor> all;
  for (const auto& img : images) {
    check_image(img);
    all.push_back(img.size(1) == size && img.size(2) == size ? img : resize_image(img, size));
  }
  const int n = static_cast<int>(all.size());
  const int holdout = n >= 2 * config.holdout ? config.holdout : 0;
  // hold out a seeded random subset so every image kind is represented
  auto gen = make_generator(mix_seed(config.seed, 0xae));
  auto order = torch::randperm(n, gen, torch::kLong);
  std::vector<torch::Tensor> train_set, held;
  for (int i = 0; i < n; ++i) {
    (i < holdout ? held : train_set).push_back(all[static_cast<std::size_t>(order[i].item<int64_t>())]);
  }
  auto train_stack = torch::stack(train_set);

  auto sample = [&](int64_t count) {
    return torch::randint(train_stack.size(0), {std::min<int64_t>(count, train_stack.size(0))}, gen, torch::kLong);
  };

  auto ae = backbone->autoencoder();
  torch::optim::Adam ae_opt(ae->parameters(), torch::optim::AdamOptions(config.autoencoder_lr));
  double ae_loss = 0.0;
  for (int s = 0; s < config.autoencoder_steps; ++s) {
    set_lr(ae_opt, config.autoencoder_lr * cosine_factor(s, config.autoencoder_steps));
    auto x = train_stack.index_select(0, sample(config.batch_size));
    auto recon = ae->decode(ae->encode(x * 2.0 - 1.0));
    auto loss = (recon - x).abs().mean();
    ae_opt.zero_grad();
    loss.backward();
    ae_opt.step();
    ae_loss = loss.item<double>();
    if (log && config.log_every > 0 && (s + 1) % config.log_every == 0) {
      *log << "autoencoder " << s + 1 << "/" << config.autoencoder_steps << " l1 " << ae_loss << std::endl;
    }
  }

  torch::Tensor latents;
  {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> chunks;
    for (int64_t i = 0; i < train_stack.size(0); i += 32) {
      auto x = train_stack.narrow(0, i, std::min<int64_t>(32, train_stack.size(0) - i));
      chunks.push_back(ae->encode(x * 2.0 - 1.0));
    }
    latents = torch::cat(chunks);
    const double std = latents.std().item<double>();
    backbone->set_latent_scale(static_cast<float>(1.0 / std::max(std, 1e-6)));
    latents = latents * backbone->latent_scale();
  }

  auto unet = backbone->unet();
  const auto& alpha_bars = backbone->schedule().alpha_bars();
  auto ab_table = torch::tensor(alpha_bars, torch::kFloat64).to(torch::kFloat32);
  torch::optim::Adam unet_opt(unet->parameters(), torch::optim::AdamOptions(config.denoiser_lr));
  const HookContext ctx;
  double unet_loss = 0.0;
  for (int s = 0; s < config.denoiser_steps; ++s) {
    set_lr(unet_opt, config.denoiser_lr * cosine_factor(s, config.denoiser_steps));
    auto idx = sample(config.batch_size);
    auto z0 = latents.index_select(0, idx);
    auto t = torch::randint(backbone->train_timesteps(), {z0.size(0)}, gen, torch::kLong);
    auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
    auto ab = ab_table.index_select(0, t).view({-1, 1, 1, 1});
    auto zt = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
    auto loss = (unet->forward(zt, t, ctx) - eps).pow(2).mean();
    unet_opt.zero_grad();
    loss.backward();
    unet_opt.step();
    unet_loss = loss.item<double>();
    if (log && config.log_every > 0 && (s + 1) % config.log_every == 0) {
      *log << "denoiser " << s + 1 << "/" << config.denoiser_steps << " mse " << unet_loss << std::endl;
    }
  }

  backbone->freeze();
  if (report) {
    report->final_autoencoder_loss = ae_loss;
    report->final_denoiser_loss = unet_loss;
    report->latent_scale = backbone->latent_scale();
    report->train_images = static_cast<int>(train_set.size());
    report->holdout_images = holdout;
    report->holdout_mae = reconstruction_mae(*backbone, held.empty() ? train_set : held);
  }
  return backbone;
}

// ---------------------------------------------------------------------------
// AccumulatingOptimizer

AccumulatingOptimizer::AccumulatingOptimizer(std::vector<ParamGroup> groups, int accumulation)
    : groups_(std::move(groups)), accumulation_(accumulation) {
  if (accumulation_ < 1) throw ConfigError("gradient accumulation must be at least 1");
  std::vector<torch::optim::OptimizerParamGroup> adam_groups;
  for (const auto& g : groups_) {
    if (!(g.lr > 0.0)) throw ConfigError("learning rate of group " + g.name + " must be positive");
    adam_groups.emplace_back(g.params, std::make_unique<torch::optim::AdamOptions>(g.lr));
  }
  adam_ = std::make_unique<torch::optim::Adam>(std::move(adam_groups));
}

std::vector<torch::Tensor> AccumulatingOptimizer::parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& g : groups_) out.insert(out.end(), g.params.begin(), g.params.end());
  return out;
}

void AccumulatingOptimizer::backward(const torch::Tensor& loss, bool retain_graph) {
  if (!loss.defined() || !loss.requires_grad()) return;
  std::vector<torch::Tensor> inputs;
  for (const auto& p : parameters()) {
    if (p.requires_grad()) inputs.push_back(p);
  }
  if (inputs.empty()) return;
  torch::autograd::backward({loss / static_cast<double>(accumulation_)}, {}, retain_graph, false, inputs);
}

bool AccumulatingOptimizer::tick() {
  if (++micro_ < accumulation_) return false;
  return flush();
}

bool AccumulatingOptimizer::flush() {
  if (micro_ == 0) return false;
  if (capture_) {
    last_gradients_.clear();
    for (const auto& p : parameters()) {
      last_gradients_.push_back(p.grad().defined() ? p.grad().detach().clone() : torch::zeros_like(p));
    }
  }
  adam_->step();
  zero_grad();
  micro_ = 0;
  ++updates_;
  return true;
}

void AccumulatingOptimizer::zero_grad() { adam_->zero_grad(); }

NamedTensors AccumulatingOptimizer::state_tensors() const {
  NamedTensors out;
  auto& state = adam_->state();
  for (const auto& g : groups_) {
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      auto it = state.find(g.params[i].unsafeGetTensorImpl());
      if (it == state.end()) continue;
      const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
      const auto prefix = g.name + "/" + std::to_string(i) + "/";
      out.emplace_back(prefix + "exp_avg", st.exp_avg().detach().clone());
      out.emplace_back(prefix + "exp_avg_sq", st.exp_avg_sq().detach().clone());
    }
  }
  return out;
}

nlohmann::json AccumulatingOptimizer::state_meta() const {
  nlohmann::json steps = nlohmann::json::object();
  auto& state = adam_->state();
  for (const auto& g : groups_) {
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      auto it = state.find(g.params[i].unsafeGetTensorImpl());
      if (it == state.end()) continue;
      steps[g.name + "/" + std::to_string(i)] =
          static_cast<const torch::optim::AdamParamState&>(*it->second).step();
    }
  }
  return {{"updates", updates_}, {"steps", steps}};
}

void AccumulatingOptimizer::load_state(const NamedTensors& tensors, const nlohmann::json& meta, int pending) {
  if (pending < 0 || pending >= accumulation_) throw ConfigError("pending micro-steps out of range");
  std::map<std::string, torch::Tensor> by_name(tensors.begin(), tensors.end());
  auto& state = adam_->state();
  state.clear();
  const auto& steps = meta.at("steps");
  for (const auto& g : groups_) {
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      const auto key = g.name + "/" + std::to_string(i);
      if (!steps.contains(key)) continue;
      auto avg = by_name.find(key + "/exp_avg");
      auto avg_sq = by_name.find(key + "/exp_avg_sq");
      if (avg == by_name.end() || avg_sq == by_name.end()) throw IoError("optimizer moments missing for " + key);
      if (avg->second.sizes() != g.params[i].sizes()) throw IoError("optimizer moment shape mismatch for " + key);
      auto st = std::make_unique<torch::optim::AdamParamState>();
      st->step(steps.at(key).get<int64_t>());
      st->exp_avg(avg->second.clone());
      st->exp_avg_sq(avg_sq->second.clone());
      state[g.params[i].unsafeGetTensorImpl()] = std::move(st);
    }
  }
  updates_ = meta.value("updates", int64_t{0});
  micro_ = pending;
  zero_grad();
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (grad_accumulation < 1) throw ConfigError("grad_accumulation must be at least 1");
  for (double lr : {lr_hijack, lr_heads, lr_encoder, lr_discriminator}) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (sampling_steps < 2) throw ConfigError("sampling_steps must be at least 2");
  if (identity_stride < 1 || sampling_steps / identity_stride < 1) throw ConfigError("identity_stride out of range");
  if (checkpoint_every < 0 || checkpoint_every % grad_accumulation != 0) {
    throw ConfigError("checkpoint_every must be a non-negative multiple of grad_accumulation");
  }
  losses.validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j{{"batch_size", batch_size},
                   {"grad_accumulation", grad_accumulation},
                   {"lr_hijack", lr_hijack},
                   {"lr_heads", lr_heads},
                   {"lr_encoder", lr_encoder},
                   {"lr_discriminator", lr_discriminator},
                   {"max_steps", max_steps},
                   {"seed", seed},
                   {"sampling_steps", sampling_steps},
                   {"identity_stride", identity_stride},
                   {"content_root", content_root.string()},
                   {"style_root", style_root.string()},
                   {"backbone", backbone.string()},
                   {"output_dir", output_dir.string()},
                   {"checkpoint_every", checkpoint_every},
                   {"encoder", encoder},
                   {"train_encoder", train_encoder},
                   {"color_match", color_match},
                   {"hijack", hijack.to_json()},
                   {"losses", losses.to_json()}};
  j["resume"] = resume ? nlohmann::json(resume->string()) : nlohmann::json(nullptr);
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grad_accumulation = j.value("grad_accumulation", c.grad_accumulation);
  c.lr_hijack = j.value("lr_hijack", c.lr_hijack);
  c.lr_heads = j.value("lr_heads", c.lr_heads);
  c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
  c.lr_discriminator = j.value("lr_discriminator", c.lr_discriminator);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
  c.sampling_steps = j.value("sampling_steps", c.sampling_steps);
  c.identity_stride = j.value("identity_stride", c.identity_stride);
  c.content_root = j.value("content_root", std::string{});
  c.style_root = j.value("style_root", std::string{});
  c.backbone = j.value("backbone", std::string{});
  c.output_dir = j.value("output_dir", std::string{});
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("resume") && !j.at("resume").is_null()) c.resume = j.at("resume").get<std::string>();
  c.encoder = j.value("encoder", c.encoder);
  c.train_encoder = j.value("train_encoder", c.train_encoder);
  c.color_match = j.value("color_match", c.color_match);
  if (j.contains("hijack")) c.hijack = HijackOptions::from_json(j.at("hijack"));
  if (j.contains("losses")) c.losses = LossConfig::from_json(j.at("losses"));
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// StepRecord

double StepRecord::term(const std::string& name) const {
  for (const auto& [n, v] : terms) {
    if (n == name) return v;
  }
  throw ConfigError("no loss term " + name);
}

void StepRecord::write(std::ostream& out) const {
  auto line = [&](const std::string& term, double value) {
    out << nlohmann::json{{"step", step}, {"term", term}, {"value", value}}.dump() << '\n';
  };
  for (const auto& [name, value] : terms) line(name, value);
  line("total", total);
  line("disc_domain", disc_domain);
  line("disc_patch", disc_patch);
  out.flush();
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::shared_ptr<StyleEncoder> resolve_encoder(const TrainConfig& config) {
  return EncoderRegistry::with_defaults(config.hijack.code_dim, config.train_encoder).get(config.encoder);
}

HijackSet seeded_hijack(const Backbone& backbone, const TrainConfig& config) {
  torch::manual_seed(mix_seed(config.seed, 0x41));
  return build_hijack(backbone.enumerate_attention_sites(), config.hijack);
}

torch::Tensor fit(const torch::Tensor& image, int size) {
  check_image(image);
  return image.size(1) == size && image.size(2) == size ? image : resize_image(image, size);
}

}  // namespace

Trainer::Trainer(TrainConfig config, std::shared_ptr<const Backbone> backbone, std::vector<torch::Tensor> contents,
                 std::vector<torch::Tensor> styles)
    : config_((config.validate(), std::move(config))),
      backbone_(std::move(backbone)),
      contents_(std::move(contents)),
      styles_(std::move(styles)),
      encoder_(resolve_encoder(config_)),
      hijack_(seeded_hijack(*backbone_, config_)),
      stylizer_(backbone_, hijack_, encoder_, config_.sampling_steps),
      identity_stylizer_(backbone_, hijack_, encoder_, config_.sampling_steps / config_.identity_stride) {
  if (!backbone_->frozen()) throw ConfigError("training needs a frozen backbone");
  const int size = backbone_->config().image_size;
  for (auto& img : contents_) img = fit(img, size);
  for (auto& img : styles_) img = fit(img, size);

  modules_ = LossModules::create(default_extractor(), encoder_, stylizer_.descriptor_dim(), mix_seed(config_.seed, 0x105));

  std::vector<ParamGroup> gen{{"hijack", hijack_.parameters(), config_.lr_hijack},
                              {"heads", modules_.head_parameters(), config_.lr_heads}};
  if (config_.train_encoder) gen.push_back({"encoder", encoder_->parameters(), config_.lr_encoder});
  generator_opt_ = std::make_unique<AccumulatingOptimizer>(std::move(gen), config_.grad_accumulation);
  discriminator_opt_ = std::make_unique<AccumulatingOptimizer>(
      std::vector<ParamGroup>{{"discriminators", modules_.discriminator_parameters(), config_.lr_discriminator}},
      config_.grad_accumulation);
}

StyleCode Trainer::code_for(const torch::Tensor& image) {
  if (!encoder_->trainable()) return encoder_->encode(image);
  return {encoder_->encode_values(image.unsqueeze(0))[0], encoder_->id()};
}

const Trainer::StyleCache& Trainer::style_inversions(const PairSample& pair) {
  if (pair.style_id >= 0) {
    auto it = style_cache_.find(pair.style_id);
    if (it != style_cache_.end()) return it->second;
  }
  auto& slot = style_cache_[pair.style_id >= 0 ? pair.style_id : -1];
  slot = {stylizer_.invert(pair.style), identity_stylizer_.invert(pair.style)};
  return slot;
}

PairForward Trainer::forward_pair(const PairSample& pair) {
  const int size = backbone_->config().image_size;
  PairSample p = pair;
  p.content = fit(pair.content, size);
  p.style = fit(pair.style, size);

  PairForward f;
  f.style = p.style;
  f.content = config_.color_match ? match_colors(p.content, p.style) : p.content;

  const auto& style_inv = style_inversions(p);
  const auto content_inv = stylizer_.invert(f.content);
  const auto style_code = code_for(p.style);

  const int t = stylizer_.steps();
  auto main = stylizer_.render(content_inv, style_inv.full.attention, style_code, InjectionWindow::scaled_default(t), t);
  f.stylized = main.image;
  f.descriptor = main.descriptor.defined() ? main.descriptor : torch::zeros({stylizer_.descriptor_dim()});

  const int ti = identity_stylizer_.steps();
  const auto window_i = InjectionWindow::scaled_default(ti);
  const auto content_inv_i = identity_stylizer_.invert(f.content);
  const auto content_code = code_for(f.content);
  f.content_identity =
      identity_stylizer_.render(content_inv_i, content_inv_i.attention, content_code, window_i, ti).image;
  f.style_identity =
      identity_stylizer_.render(style_inv.identity, style_inv.identity.attention, style_code, window_i, ti).image;
  return f;
}

std::vector<PairSample> Trainer::sample_batch(int64_t step) const {
  if (contents_.empty() || styles_.empty()) throw ConfigError("training corpus is empty");
  const int64_t window = step / config_.grad_accumulation;
  const int64_t micro = step % config_.grad_accumulation;

  std::mt19937_64 rng(mix_seed(config_.seed, static_cast<uint64_t>(window)));
  std::vector<int> style_order(styles_.size()), content_order(contents_.size());
  std::iota(style_order.begin(), style_order.end(), 0);
  std::iota(content_order.begin(), content_order.end(), 0);
  std::shuffle(style_order.begin(), style_order.end(), rng);
  std::shuffle(content_order.begin(), content_order.end(), rng);

  // Two styles crossed with per_window / 2 contents: every pair has a same-style and a same-content partner.
  std::vector<PairSample> out;
  for (int i = 0; i < config_.batch_size; ++i) {
    const int64_t j = micro * config_.batch_size + i;
    const int s = style_order[static_cast<std::size_t>(j % 2) % style_order.size()];
    const int c = content_order[static_cast<std::size_t>(j / 2) % content_order.size()];
    out.push_back({contents_[static_cast<std::size_t>(c)], styles_[static_cast<std::size_t>(s)], c, s});
  }
  return out;
}

StepRecord Trainer::train_step(const std::vector<PairSample>& batch) {
  if (batch.empty()) throw BatchError("empty training batch");
  if (step_ % config_.grad_accumulation == 0) bank_.clear();

  const auto& names = loss_term_names();
  std::map<std::string, double> sums;
  StepRecord rec;
  const double scale = 1.0 / static_cast<double>(batch.size());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pair = batch[i];
    auto f = forward_pair(pair);

    StylizationBatch sb;
    sb.content = f.content;
    sb.style = f.style;
    sb.stylized = f.stylized;
    sb.style_identity = f.style_identity;
    sb.content_identity = f.content_identity;
    sb.contrastive = bank_;
    sb.contrastive.push_back({pair.style_id, pair.content_id, f.descriptor});
    sb.crop_seed = mix_seed(config_.seed, static_cast<uint64_t>(step_ * config_.batch_size) + i);

    auto cfg = config_.losses;
    std::vector<ContrastiveItem> ids;
    for (const auto& s : sb.contrastive) ids.push_back({s.style_id, s.content_id, {}, {}});
    if (!has_contrastive_pairings(ids)) {
      cfg.disabled.insert("s_contra");
      cfg.disabled.insert("c_contra");
    }

    auto breakdown = total_loss(sb, modules_, cfg);
    generator_opt_->backward(breakdown.total * scale);
    torch::Tensor disc;
    if (breakdown.domain_discriminator.defined()) disc = breakdown.domain_discriminator;
    if (breakdown.patch_discriminator.defined()) {
      disc = disc.defined() ? disc + breakdown.patch_discriminator : breakdown.patch_discriminator;
    }
    if (disc.defined()) {
      discriminator_opt_->backward(disc * scale);
      if (breakdown.domain_discriminator.defined()) rec.disc_domain += breakdown.domain_discriminator.item<double>() * scale;
      if (breakdown.patch_discriminator.defined()) rec.disc_patch += breakdown.patch_discriminator.item<double>() * scale;
    }
    for (const auto& [name, value] : breakdown.terms) sums[name] += value.item<double>() * scale;
    rec.total += breakdown.total.item<double>() * scale;

    bank_.push_back({pair.style_id, pair.content_id, f.descriptor.detach()});
  }

  rec.updated = generator_opt_->tick();
  discriminator_opt_->tick();
  ++step_;
  rec.step = step_;
  for (const auto& name : names) rec.terms.emplace_back(name, sums.count(name) ? sums[name] : 0.0);
  return rec;
}

StepRecord Trainer::step() { return train_step(sample_batch(step_)); }

bool Trainer::flush() {
  const bool stepped = generator_opt_->flush();
  discriminator_opt_->flush();
  return stepped;
}

Checkpoint Trainer::checkpoint() const {
  if (generator_opt_->pending() != 0) throw ConfigError("checkpoints are only taken at accumulation boundaries");
  auto cloned = [](NamedTensors tensors) {
    for (auto& [name, t] : tensors) t = t.detach().clone();
    return tensors;
  };
  Checkpoint c;
  c.backbone = backbone_;
  c.backbone_fingerprint = backbone_->fingerprint();
  c.step = step_;
  c.train_config = config_.to_json();
  c.hijack_options = config_.hijack.to_json();
  c.encoder_name = encoder_->id();
  c.code_dim = encoder_->dim();
  c.encoder_trainable = encoder_->trainable();
  c.descriptor_dim = stylizer_.descriptor_dim();
  c.hijack = cloned(hijack_.named_state());
  c.loss_modules = cloned(modules_.named_state());
  if (encoder_->trainable()) c.encoder = cloned(encoder_->named_state());
  for (const auto& [name, t] : generator_opt_->state_tensors()) c.optimizer.emplace_back("generator/" + name, t);
  for (const auto& [name, t] : discriminator_opt_->state_tensors()) c.optimizer.emplace_back("discriminator/" + name, t);
  c.optimizer_meta = {{"generator", generator_opt_->state_meta()}, {"discriminator", discriminator_opt_->state_meta()}};
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  if (c.backbone_fingerprint != backbone_->fingerprint()) {
    throw TraceError("checkpoint was trained against a different backbone");
  }
  if (c.encoder_name != encoder_->id()) throw EncoderError("checkpoint encoder " + c.encoder_name + " differs from " + encoder_->id());
  hijack_.load_state(c.hijack);
  modules_.load_state(c.loss_modules);
  if (!c.encoder.empty()) encoder_->load_state(c.encoder);

  NamedTensors gen, disc;
  for (const auto& [name, t] : c.optimizer) {
    const auto slash = name.find('/');
    const auto owner = name.substr(0, slash);
    (owner == "generator" ? gen : disc).emplace_back(name.substr(slash + 1), t);
  }
  // A checkpoint taken after a flushed partial window resumes with the rest of that window skipped.
  const int pending = static_cast<int>(c.step % config_.grad_accumulation);
  generator_opt_->load_state(gen, c.optimizer_meta.at("generator"), pending);
  discriminator_opt_->load_state(disc, c.optimizer_meta.at("discriminator"), pending);
  step_ = c.step;
  bank_.clear();
}

// ---------------------------------------------------------------------------
// train()

TrainResult train(const TrainConfig& config, std::ostream* progress) {
  config.validate();
  if (config.backbone.empty()) throw ConfigError("train config needs a backbone path");
  if (config.output_dir.empty()) throw ConfigError("train config needs an output_dir");
  auto backbone = Backbone::load(config.backbone);
  const int size = backbone->config().image_size;
  auto contents = load_image_dir(config.content_root, size);
  auto styles = load_image_dir(config.style_root, size);
  if (contents.empty()) throw ConfigError("no content images in " + config.content_root.string());
  if (styles.empty()) throw ConfigError("no style images in " + config.style_root.string());

  Trainer trainer(config, backbone, std::move(contents), std::move(styles));
  if (config.resume) trainer.restore(Checkpoint::load(*config.resume));

  fs::create_directories(config.output_dir / "checkpoints");
  auto checkpoint_dir = [&](int64_t step) {
    char name[32];
    std::snprintf(name, sizeof(name), "step_%08lld", static_cast<long long>(step));
    return config.output_dir / "checkpoints" / name;
  };

  TrainResult result;
  result.log_path = config.output_dir / "loss_log.jsonl";
  std::ofstream log(result.log_path, config.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + result.log_path.string());
  if (!config.resume) trainer.checkpoint().save(checkpoint_dir(0));

  while (trainer.steps_done() < config.max_steps) {
    auto rec = trainer.step();
    rec.write(log);
    if (progress && (rec.step % 10 == 0 || rec.step == config.max_steps)) {
      *progress << "step " << rec.step << "/" << config.max_steps << " total " << std::setprecision(6) << rec.total
                << std::endl;
    }
    result.records.push_back(std::move(rec));
    if (config.checkpoint_every > 0 && trainer.steps_done() % config.checkpoint_every == 0) {
      trainer.checkpoint().save(checkpoint_dir(trainer.steps_done()));
    }
  }
  trainer.flush();
  result.checkpoint = trainer.checkpoint();
  result.checkpoint.save(config.output_dir / "final");
  return result;
}

}  // namespace diffnst
