#include "diffnst/losses.hpp"

#include <cmath>

#include "diffnst/error.hpp"
#include "diffnst/imageops.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  for (double v : {vgg, adv, percep, identity, aladin, contra, patch, p_simple, p_complex}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
}

nlohmann::json LossWeights::to_json() const {
  return {{"vgg", vgg},         {"adv", adv},         {"percep", percep},     {"identity", identity},
          {"aladin", aladin},   {"contra", contra},   {"patch", patch},       {"p_simple", p_simple},
          {"p_complex", p_complex}, {"temperature", temperature}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.vgg = j.value("vgg", w.vgg);
  w.adv = j.value("adv", w.adv);
  w.percep = j.value("percep", w.percep);
  w.identity = j.value("identity", w.identity);
  w.aladin = j.value("aladin", w.aladin);
  w.contra = j.value("contra", w.contra);
  w.patch = j.value("patch", w.patch);
  w.p_simple = j.value("p_simple", w.p_simple);
  w.p_complex = j.value("p_complex", w.p_complex);
  w.temperature = j.value("temperature", w.temperature);
  w.validate();
  return w;
}

LossWeights LossWeights::unit() {
  LossWeights w;
  w.vgg = w.adv = w.percep = w.identity = w.aladin = w.contra = w.patch = w.p_simple = w.p_complex = 1.0;
  return w;
}

const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"style",  "adv",      "percep",   "id_s",     "id_c",
                                              "aladin", "s_contra", "c_contra", "p_simple", "p_complex"};
  return names;
}

void LossConfig::validate() const {
  weights.validate();
  for (const auto& term : disabled) {
    const auto& names = loss_term_names();
    if (std::find(names.begin(), names.end(), term) == names.end()) throw ConfigError("unknown loss term: " + term);
  }
  if (crop_size < 1 || crops_per_bin < 1 || crop_candidates < 1) throw ConfigError("crop settings must be positive");
}

nlohmann::json LossConfig::to_json() const {
  return {{"weights", weights.to_json()},
          {"disabled", std::vector<std::string>(disabled.begin(), disabled.end())},
          {"crop_size", crop_size},
          {"crops_per_bin", crops_per_bin},
          {"crop_candidates", crop_candidates}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
  if (j.contains("disabled")) {
    for (const auto& t : j.at("disabled")) c.disabled.insert(t.get<std::string>());
  }
  c.crop_size = j.value("crop_size", c.crop_size);
  c.crops_per_bin = j.value("crops_per_bin", c.crops_per_bin);
  c.crop_candidates = j.value("crop_candidates", c.crop_candidates);
  c.validate();
  return c;
}

DomainDiscriminatorImpl::DomainDiscriminatorImpl() {
  auto conv = [](int in, int out) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)); };
  auto act = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  body_ = register_module("body", torch::nn::Sequential(conv(3, 32), act(), conv(32, 64), act(), conv(64, 128), act()));
  head_ = register_module("head", torch::nn::Linear(128, 1));
}

torch::Tensor DomainDiscriminatorImpl::forward(const torch::Tensor& images) {
  auto h = body_->forward(as_batch(images) * 2.0 - 1.0);
  return head_->forward(h.mean({2, 3})).squeeze(1);
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl() {
  auto act = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  body_ = register_module(
      "body", torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(8, 32, 3).padding(1)), act(),
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(32, 64, 4).stride(2).padding(1)), act(),
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(64, 64, 3).padding(1)), act()));
  head_ = register_module("head", torch::nn::Linear(64, 1));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& query, const torch::Tensor& reference) {
  auto h = body_->forward(torch::cat({query, reference}, 1) * 2.0 - 1.0);
  return head_->forward(h.mean({2, 3})).squeeze(1);
}

ProjectionHeadImpl::ProjectionHeadImpl(int in_dim, int hidden, int out_dim) {
  fc1_ = register_module("fc1", torch::nn::Linear(in_dim, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& x) {
  return F::normalize(fc2_->forward(torch::relu(fc1_->forward(x))), F::NormalizeFuncOptions().dim(-1));
}

namespace {

// Plain L2 norm of each image's difference, averaged over the batch.
torch::Tensor batch_norm_mean(const torch::Tensor& diff) { return diff.flatten(1).norm(2, 1).mean(); }

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ConfigError(std::string(what) + ": image shapes differ");
}

}  // namespace

torch::Tensor style_loss(const FeatureExtractor& extractor, const torch::Tensor& stylized, const torch::Tensor& style,
                         const LossWeights& w) {
  require_same_shape(as_batch(stylized), as_batch(style), "style_loss");
  auto fa = extractor.features(stylized);
  auto fb = extractor.features(style);
  torch::Tensor sum = torch::zeros({}, stylized.options());
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto [ma, sa] = channel_stats(fa[i]);
    auto [mb, sb] = channel_stats(fb[i]);
    sum = sum + (ma - mb).norm(2, 1).mean() + (sa - sb).norm(2, 1).mean();
  }
  return w.vgg * sum;
}

torch::Tensor perceptual_loss(const FeatureExtractor& extractor, const torch::Tensor& stylized,
                              const torch::Tensor& content, const LossWeights& w) {
  require_same_shape(as_batch(stylized), as_batch(content), "perceptual_loss");
  return w.percep * batch_norm_mean(extractor.perceptual(stylized) - extractor.perceptual(content));
}

torch::Tensor identity_loss(const torch::Tensor& reconstruction, const torch::Tensor& target, const LossWeights& w) {
  require_same_shape(reconstruction, target, "identity_loss");
  return w.identity * batch_norm_mean(as_batch(reconstruction) - as_batch(target));
}

torch::Tensor identity_losses(const torch::Tensor& style_identity, const torch::Tensor& style,
                              const torch::Tensor& content_identity, const torch::Tensor& content,
                              const LossWeights& w) {
  return identity_loss(style_identity, style, w) + identity_loss(content_identity, content, w);
}

torch::Tensor aladin_loss(const StyleEncoder& encoder, const torch::Tensor& stylized, const torch::Tensor& style,
                          const LossWeights& w) {
  require_same_shape(as_batch(stylized), as_batch(style), "aladin_loss");
  return w.aladin * batch_norm_mean(encoder.encode_values(as_batch(stylized)) - encoder.encode_values(as_batch(style)));
}

torch::Tensor aladin_loss(const StyleCode& stylized, const StyleCode& style, const LossWeights& w) {
  require_same_encoder({&stylized, &style});
  return w.aladin * (stylized.values - style.values).norm();
}

AdversarialTerms adversarial_losses(const Critic& critic, const torch::Tensor& style, const torch::Tensor& stylized,
                                    const LossWeights& w) {
  auto real = critic(as_batch(style));
  auto fake_detached = critic(as_batch(stylized).detach());
  auto fake = critic(as_batch(stylized));
  AdversarialTerms t;
  t.discriminator = w.adv * (F::logsigmoid(real).mean() + F::logsigmoid(-fake_detached).mean());
  t.generator = w.adv * (-F::logsigmoid(fake).mean());
  return t;
}

PatchTerms patch_losses(const PatchCritic& critic, const torch::Tensor& stylized, const torch::Tensor& style,
                        const LossConfig& config, uint64_t seed) {
  if (stylized.dim() != 3 || style.dim() != 3) throw ConfigError("patch_losses expects single [3,H,W] images");
  require_same_shape(stylized, style, "patch_losses");
  const int n = config.crops_per_bin, size = config.crop_size;
  auto sobel_sc = sobel_map(stylized);
  auto sobel_s = sobel_map(style.detach());

  auto bin_terms = [&](CropBin bin, uint64_t salt) {
    auto win_sc = select_crops(sobel_sc, n, size, bin, mix_seed(seed, salt), config.crop_candidates);
    auto win_s = select_crops(sobel_s, n, size, bin, mix_seed(seed, salt + 1), config.crop_candidates);
    auto query = crops_with_sobel(stylized, sobel_sc, win_sc, size);
    auto reference = crops_with_sobel(style.detach(), sobel_s, win_s, size);
    // Real pairs match each style crop with a different one from the same bin.
    auto other = reference.roll(1, 0);
    auto generator = -F::logsigmoid(critic(query, reference)).mean();
    auto objective = F::logsigmoid(critic(other, reference)).mean() +
                     F::logsigmoid(-critic(query.detach(), reference)).mean();
    return std::make_pair(generator, objective);
  };
  auto [simple, simple_obj] = bin_terms(CropBin::kSimple, 10);
  auto [complex, complex_obj] = bin_terms(CropBin::kComplex, 20);
  const double ws = config.weights.patch * config.weights.p_simple;
  const double wc = config.weights.patch * config.weights.p_complex;
  return {ws * simple, wc * complex, ws * simple_obj, wc * complex_obj};
}

namespace {

// Mean over qualifying anchors of the InfoNCE term; positives and negatives are
// chosen by `relation(anchor, other)`: +1 positive, -1 negative, 0 ignored.
torch::Tensor info_nce(const std::vector<torch::Tensor>& embeddings, const std::function<int(std::size_t, std::size_t)>& relation,
                       double temperature, bool* any) {
  std::vector<torch::Tensor> per_anchor;
  for (std::size_t a = 0; a < embeddings.size(); ++a) {
    std::vector<torch::Tensor> positives, negatives;
    for (std::size_t o = 0; o < embeddings.size(); ++o) {
      if (o == a) continue;
      const int r = relation(a, o);
      auto logit = (embeddings[a] * embeddings[o]).sum() / temperature;
      if (r > 0) positives.push_back(logit);
      if (r < 0) negatives.push_back(logit);
    }
    if (positives.empty() || negatives.empty()) continue;
    auto neg = torch::stack(negatives);
    for (const auto& pos : positives) {
      // -log(exp(p) / (exp(p) + sum exp(n)))
      per_anchor.push_back(torch::logsumexp(torch::cat({pos.unsqueeze(0), neg}), 0) - pos);
    }
  }
  *any = !per_anchor.empty();
  if (per_anchor.empty()) return {};
  return torch::stack(per_anchor).mean();
}

}  // namespace

bool has_contrastive_pairings(const std::vector<ContrastiveItem>& items) {
  bool style_ok = false, content_ok = false;
  for (const auto& a : items) {
    bool sp = false, sn = false, cp = false, cn = false;
    for (const auto& o : items) {
      if (&a == &o) continue;
      if (o.style_id == a.style_id && o.content_id != a.content_id) sp = true;
      if (o.style_id != a.style_id) sn = true;
      if (o.content_id == a.content_id && o.style_id != a.style_id) cp = true;
      if (o.content_id != a.content_id) cn = true;
    }
    style_ok = style_ok || (sp && sn);
    content_ok = content_ok || (cp && cn);
  }
  return style_ok && content_ok;
}

ContrastiveTerms contrastive_losses(const std::vector<ContrastiveItem>& items, const LossWeights& w) {
  std::vector<torch::Tensor> style_emb, content_emb;
  for (const auto& it : items) {
    style_emb.push_back(it.style_embedding);
    content_emb.push_back(it.content_embedding);
  }
  bool style_any = false, content_any = false;
  auto style = info_nce(
      style_emb,
      [&](std::size_t a, std::size_t o) {
        if (items[o].style_id == items[a].style_id) return items[o].content_id != items[a].content_id ? 1 : 0;
        return -1;
      },
      w.temperature, &style_any);
  auto content = info_nce(
      content_emb,
      [&](std::size_t a, std::size_t o) {
        if (items[o].content_id == items[a].content_id) return items[o].style_id != items[a].style_id ? 1 : 0;
        return -1;
      },
      w.temperature, &content_any);
  if (!style_any) throw BatchError("contrastive batch has no same-style/different-content pair with a negative");
  if (!content_any) throw BatchError("contrastive batch has no same-content/different-style pair with a negative");
  return {w.contra * style, w.contra * content};
}

LossModules LossModules::create(std::shared_ptr<const FeatureExtractor> extractor,
                                std::shared_ptr<const StyleEncoder> encoder, int descriptor_dim, uint64_t seed) {
  torch::manual_seed(seed);
  LossModules m;
  m.extractor = std::move(extractor);
  m.encoder = std::move(encoder);
  m.domain = DomainDiscriminator();
  m.patch = PatchDiscriminator();
  m.style_head = ProjectionHead(descriptor_dim);
  m.content_head = ProjectionHead(descriptor_dim);
  return m;
}

std::vector<torch::Tensor> LossModules::discriminator_parameters() const {
  auto out = domain->parameters();
  for (const auto& p : patch->parameters()) out.push_back(p);
  return out;
}

std::vector<torch::Tensor> LossModules::head_parameters() const {
  auto out = style_head->parameters();
  for (const auto& p : content_head->parameters()) out.push_back(p);
  return out;
}

namespace {

std::vector<std::pair<std::string, torch::nn::Module*>> loss_module_list(const LossModules& m) {
  return {{"domain", m.domain.ptr().get()},
          {"patch", m.patch.ptr().get()},
          {"style_head", m.style_head.ptr().get()},
          {"content_head", m.content_head.ptr().get()}};
}

}  // namespace

NamedTensors LossModules::named_state() const {
  NamedTensors out;
  for (const auto& [prefix, module] : loss_module_list(*this)) {
    for (const auto& item : module->named_parameters()) out.emplace_back(prefix + "." + item.key(), item.value());
  }
  return out;
}

void LossModules::load_state(const NamedTensors& state) {
  auto current = named_state();
  if (current.size() != state.size()) throw ConfigError("loss module state has the wrong number of tensors");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < current.size(); ++i) {
    if (current[i].first != state[i].first || current[i].second.sizes() != state[i].second.sizes()) {
      throw ConfigError("loss module state mismatch at " + state[i].first);
    }
    current[i].second.copy_(state[i].second);
  }
}

void LossModules::to(torch::Dtype dtype) {
  for (const auto& entry : loss_module_list(*this)) entry.second->to(dtype);
}

bool LossBreakdown::has(const std::string& term) const {
  for (const auto& t : terms) {
    if (t.first == term) return true;
  }
  return false;
}

double LossBreakdown::value(const std::string& term) const {
  for (const auto& t : terms) {
    if (t.first == term) return t.second.item<double>();
  }
  throw ConfigError("loss term not in breakdown: " + term);
}

nlohmann::json LossBreakdown::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, value] : terms) j[name] = value.item<double>();
  j["total"] = total.item<double>();
  if (domain_discriminator.defined()) j["disc_domain"] = domain_discriminator.item<double>();
  if (patch_discriminator.defined()) j["disc_patch"] = patch_discriminator.item<double>();
  return j;
}

LossBreakdown total_loss(const StylizationBatch& batch, const LossModules& m, const LossConfig& config) {
  const auto& w = config.weights;
  LossBreakdown out;
  auto add = [&](const std::string& name, const torch::Tensor& value) {
    if (!torch::isfinite(value).all().item<bool>()) throw LossError("non-finite loss term: " + name);
    out.terms.emplace_back(name, value);
  };

  if (config.enabled("style")) add("style", style_loss(*m.extractor, batch.stylized, batch.style, w));
  if (config.enabled("adv")) {
    auto domain = m.domain;
    auto adv = adversarial_losses([&](const torch::Tensor& x) { return domain->forward(x); }, batch.style,
                                  batch.stylized, w);
    add("adv", adv.generator);
    out.domain_discriminator = -adv.discriminator;
  }
  if (config.enabled("percep")) add("percep", perceptual_loss(*m.extractor, batch.stylized, batch.content, w));
  if (config.enabled("id_s")) add("id_s", identity_loss(batch.style_identity, batch.style, w));
  if (config.enabled("id_c")) add("id_c", identity_loss(batch.content_identity, batch.content, w));
  if (config.enabled("aladin")) add("aladin", aladin_loss(*m.encoder, batch.stylized, batch.style, w));

  const bool want_s = config.enabled("s_contra"), want_c = config.enabled("c_contra");
  if (want_s || want_c) {
    auto style_head = m.style_head;
    auto content_head = m.content_head;
    std::vector<ContrastiveItem> items;
    for (const auto& s : batch.contrastive) {
      items.push_back({s.style_id, s.content_id, style_head->forward(s.descriptor), content_head->forward(s.descriptor)});
    }
    auto terms = contrastive_losses(items, w);
    if (want_s) add("s_contra", terms.style);
    if (want_c) add("c_contra", terms.content);
  }

  const bool want_ps = config.enabled("p_simple"), want_pc = config.enabled("p_complex");
  if (want_ps || want_pc) {
    auto patch = m.patch;
    auto terms = patch_losses(
        [&](const torch::Tensor& q, const torch::Tensor& r) { return patch->forward(q, r); }, batch.stylized,
        batch.style, config, batch.crop_seed);
    torch::Tensor objective = torch::zeros({}, batch.stylized.options());
    if (want_ps) {
      add("p_simple", terms.simple);
      objective = objective + terms.simple_discriminator;
    }
    if (want_pc) {
      add("p_complex", terms.complex);
      objective = objective + terms.complex_discriminator;
    }
    out.patch_discriminator = -objective;
  }

  out.total = torch::zeros({}, batch.stylized.options());
  for (const auto& t : out.terms) out.total = out.total + t.second;
  return out;
}

void write_loss_log(std::ostream& out, int64_t step, const LossBreakdown& breakdown) {
  auto record = [&](const std::string& term, const torch::Tensor& value) {
    out << nlohmann::json{{"step", step}, {"term", term}, {"value", value.item<double>()}}.dump() << '\n';
  };
  for (const auto& [name, value] : breakdown.terms) record(name, value);
  record("total", breakdown.total);
  if (breakdown.domain_discriminator.defined()) record("disc_domain", breakdown.domain_discriminator);
  if (breakdown.patch_discriminator.defined()) record("disc_patch", breakdown.patch_discriminator);
}

}  // namespace diffnst
