#include "diffnst/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "diffnst/checkpoint.hpp"
#include "diffnst/error.hpp"
#include "diffnst/image_io.hpp"
#include "diffnst/imageops.hpp"

namespace diffnst {

// ---------------------------------------------------------------------------
// Stylizer

Stylizer::Stylizer(std::shared_ptr<const Backbone> backbone, HijackSet hijack,
                   std::shared_ptr<const StyleEncoder> encoder, int steps)
    : backbone_(std::move(backbone)), hijack_(std::move(hijack)), encoder_(std::move(encoder)),
      sampler_(backbone_, steps) {
  if (!encoder_) throw ConfigError("stylizer needs a style encoder");
  if (encoder_->dim() != hijack_.options().code_dim) {
    throw ConfigError("style encoder dim " + std::to_string(encoder_->dim()) + " does not match hijack code_dim " +
                      std::to_string(hijack_.options().code_dim));
  }
}

int Stylizer::descriptor_dim() const {
  int total = 0;
  for (const auto& site : hijack_.sites()) total += site.v_dim;
  return total;
}

InvertedImage Stylizer::invert(const torch::Tensor& image) const {
  torch::NoGradGuard no_grad;
  InvertedImage out;
  out.image = image;
  out.latent = backbone_->encode(image);
  auto inv = sampler_.invert(out.latent, AttentionPolicy::record());
  out.noise = std::move(inv.noise);
  out.terminal = inv.terminal;
  out.attention = std::move(*inv.attention);
  return out;
}

StyleCode Stylizer::style_code(const torch::Tensor& style_image) const { return encoder_->encode(style_image); }

RenderResult Stylizer::render(const InvertedImage& content, const AttentionTrace& style_trace, const StyleCode& code,
                              const InjectionWindow& window, int attn_stop, bool record_replaced) const {
  if (style_trace.source_fingerprint() != sampler_.trace_fingerprint()) {
    throw TraceError("style trace was produced by a different backbone or schedule");
  }
  // step -> per-site token means, filled in hook order
  auto pooled = std::make_shared<std::map<int, std::map<std::string, torch::Tensor>>>();
  VTap tap = [pooled](const AttentionSite& site, int step, const torch::Tensor& v) {
    (*pooled)[step][site.site_id] = v.mean(1);
  };
  auto policy = wire_policy(hijack_, style_trace, code, attn_stop, std::move(tap));
  policy.record_replaced = record_replaced;

  auto reversed = sampler_.reverse(content.terminal, &content.noise, window, policy);
  RenderResult out;
  out.latent = reversed.latent;
  out.image = backbone_->decode(reversed.latent);
  out.attention = std::move(reversed.attention);

  std::vector<torch::Tensor> per_step;
  for (const auto& [step, by_site] : *pooled) {
    if (by_site.size() != hijack_.sites().size()) continue;
    std::vector<torch::Tensor> parts;
    for (const auto& site : hijack_.sites()) parts.push_back(by_site.at(site.site_id));
    per_step.push_back(torch::cat(parts, -1));
  }
  if (!per_step.empty()) out.descriptor = torch::stack(per_step).mean(0).squeeze(0);
  return out;
}

RenderResult Stylizer::reconstruct(const InvertedImage& content, const InjectionWindow& window, bool record) const {
  auto reversed = sampler_.reverse(content.terminal, &content.noise, window,
                                   record ? AttentionPolicy::record() : AttentionPolicy::none());
  RenderResult out;
  out.latent = reversed.latent;
  out.image = backbone_->decode(reversed.latent);
  out.attention = std::move(reversed.attention);
  return out;
}

// ---------------------------------------------------------------------------
// Requests

InjectionWindow StylizeOptions::window(int steps) const {
  auto w = InjectionWindow::scaled_default(steps);
  if (noise_start) w.start_step = *noise_start;
  if (noise_end) w.end_step = *noise_end;
  return w;
}

int StylizeOptions::stop(int steps) const { return attn_stop.value_or(steps); }

void StylizeOptions::validate(int steps) const {
  const auto w = window(steps);
  if (w.start_step < 0 || w.start_step >= w.end_step || w.end_step > steps) {
    throw ConfigError("noise window [" + std::to_string(w.start_step) + ", " + std::to_string(w.end_step) +
                      ") must satisfy 0 <= noise_start < noise_end <= " + std::to_string(steps));
  }
  const int s = stop(steps);
  if (s < 0 || s > steps) {
    throw ConfigError("attn_stop " + std::to_string(s) + " outside [0, " + std::to_string(steps) + "]");
  }
}

nlohmann::json StylizeOptions::to_json() const {
  nlohmann::json j{{"color_match", color_match}, {"seed", seed}};
  j["noise_start"] = noise_start ? nlohmann::json(*noise_start) : nlohmann::json(nullptr);
  j["noise_end"] = noise_end ? nlohmann::json(*noise_end) : nlohmann::json(nullptr);
  j["attn_stop"] = attn_stop ? nlohmann::json(*attn_stop) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json StylizeRequest::to_json() const {
  auto j = options.to_json();
  j["content"] = content.string();
  j["style"] = style.string();
  j["output"] = output.string();
  return j;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "noise_start" || name == "noise-start") return SweepAxis::kNoiseStart;
  if (name == "attn_stop" || name == "attn-stop") return SweepAxis::kAttnStop;
  throw ConfigError("unknown sweep axis '" + name + "' (expected noise_start or attn_stop)");
}

std::string to_string(SweepAxis axis) { return axis == SweepAxis::kNoiseStart ? "noise_start" : "attn_stop"; }

std::filesystem::path result_dir(const std::filesystem::path& out, const std::filesystem::path& content,
                                 const std::filesystem::path& style) {
  return out / (content.stem().string() + "__" + style.stem().string());
}

// ---------------------------------------------------------------------------
// Attention analysis

Heatmap attention_diff_heatmap(const AttentionTrace& a, const AttentionTrace& b) {
  if (!a.same_grid(b)) throw TraceError("attention traces cover different site/step grids");
  Heatmap h;
  h.steps = a.steps();
  for (const auto& [key, v] : a.entries()) {
    if (std::find(h.sites.begin(), h.sites.end(), key.first) == h.sites.end()) h.sites.push_back(key.first);
  }
  h.raw = torch::zeros({static_cast<int64_t>(h.sites.size()), h.steps}, torch::kFloat64);
  auto acc = h.raw.accessor<double, 2>();
  for (const auto& [key, v] : a.entries()) {
    const auto row = std::find(h.sites.begin(), h.sites.end(), key.first) - h.sites.begin();
    const auto& w = b.at(key.first, key.second);
    acc[row][key.second] = (v.to(torch::kFloat64) - w.to(torch::kFloat64)).abs().mean().item<double>();
  }
  const double peak = h.raw.numel() ? h.raw.max().item<double>() : 0.0;
  h.normalized = peak > 0.0 ? h.raw / peak : torch::zeros_like(h.raw);
  return h;
}

torch::Tensor Heatmap::render(int cell) const {
  if (cell < 1) throw ConfigError("heatmap cell size must be positive");
  auto x = normalized.to(torch::kFloat32).clamp(0.0, 1.0);
  // black -> red -> yellow -> white
  auto r = (x * 3.0).clamp(0.0, 1.0);
  auto g = (x * 3.0 - 1.0).clamp(0.0, 1.0);
  auto bl = (x * 3.0 - 2.0).clamp(0.0, 1.0);
  auto img = torch::stack({r, g, bl});
  return img.repeat_interleave(cell, 1).repeat_interleave(cell, 2).contiguous();
}

nlohmann::json Heatmap::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json norm_rows = nlohmann::json::array();
  for (int64_t i = 0; i < raw.size(0); ++i) {
    std::vector<double> r(raw[i].data_ptr<double>(), raw[i].data_ptr<double>() + raw.size(1));
    std::vector<double> n(normalized[i].data_ptr<double>(), normalized[i].data_ptr<double>() + raw.size(1));
    rows.push_back(r);
    norm_rows.push_back(n);
  }
  return {{"sites", sites}, {"steps", steps}, {"raw", rows}, {"normalized", norm_rows}};
}

ReverseResult interpolate_v(const Sampler& sampler, const torch::Tensor& init, const NoiseTrace* noise,
                            const InjectionWindow& window, const AttentionTrace& trace_a,
                            const AttentionTrace& trace_b, double alpha) {
  if (!std::isfinite(alpha)) throw ConfigError("interpolation alpha must be finite");
  for (const auto* t : {&trace_a, &trace_b}) {
    if (t->source_fingerprint() != sampler.trace_fingerprint() || t->steps() != sampler.steps()) {
      throw TraceError("interpolation trace was produced by a different backbone or schedule");
    }
  }
  std::set<std::string> sites;
  for (const auto& [key, v] : trace_b.entries()) {
    if (!trace_a.contains(key.first, key.second)) {
      throw TraceError("trace a has no V for " + key.first + " at step " + std::to_string(key.second));
    }
    if (trace_a.at(key.first, key.second).sizes() != v.sizes()) {
      throw ResolutionError("V shapes differ at " + key.first + " step " + std::to_string(key.second));
    }
    sites.insert(key.first);
  }
  auto fn = [&trace_a, &trace_b, alpha](const AttentionSite& site, int step, const torch::Tensor& v) {
    if (!trace_b.contains(site.site_id, step)) return v;
    const auto& va = trace_a.at(site.site_id, step);
    const auto& vb = trace_b.at(site.site_id, step);
    return (va * (1.0 - alpha) + vb * alpha).to(v.dtype());
  };
  auto policy = AttentionPolicy::replace(fn, -1, std::vector<std::string>(sites.begin(), sites.end()));
  if (sites.empty()) policy = AttentionPolicy::none();
  return sampler.reverse(init, noise, window, policy);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct Prepared {
  InvertedImage content;
  InvertedImage style;
  StyleCode code;
};

Prepared prepare_inversions(const Stylizer& stylizer, const torch::Tensor& content, const torch::Tensor& style) {
  torch::NoGradGuard no_grad;
  return {stylizer.invert(content), stylizer.invert(style), stylizer.style_code(style)};
}

torch::Tensor render_with(const Stylizer& stylizer, const Prepared& p, const StylizeOptions& options) {
  torch::NoGradGuard no_grad;
  const int t = stylizer.steps();
  return stylizer.render(p.content, p.style.attention, p.code, options.window(t), options.stop(t)).image.clamp(0.0, 1.0);
}

}  // namespace

Pipeline::Pipeline(Stylizer stylizer) : stylizer_(std::move(stylizer)) {}

Pipeline Pipeline::load(const std::filesystem::path& checkpoint, int steps) {
  if (!std::filesystem::exists(checkpoint / "manifest.json")) {
    throw IoError("checkpoint not found: " + checkpoint.string());
  }
  auto ckpt = Checkpoint::load(checkpoint);
  auto options = HijackOptions::from_json(ckpt.hijack_options);
  auto hijack = build_hijack(ckpt.backbone->enumerate_attention_sites(), options);
  hijack.load_state(ckpt.hijack);
  hijack.train(false);

  auto registry = EncoderRegistry::with_defaults(ckpt.code_dim, ckpt.encoder_trainable);
  auto encoder = registry.get(ckpt.encoder_name);
  if (encoder->id() != ckpt.encoder_name) {
    throw EncoderError("checkpoint encoder " + ckpt.encoder_name + " resolved to " + encoder->id());
  }
  if (!ckpt.encoder.empty()) encoder->load_state(ckpt.encoder);

  if (steps == 0) steps = ckpt.train_config.value("sampling_steps", 0);
  return Pipeline(Stylizer(ckpt.backbone, std::move(hijack), std::move(encoder), steps));
}

std::pair<torch::Tensor, torch::Tensor> Pipeline::prepare(const torch::Tensor& content, const torch::Tensor& style,
                                                          bool color_match) const {
  check_image(content);
  check_image(style);
  const int size = stylizer_.backbone().config().image_size;
  auto c = (content.size(1) == size && content.size(2) == size) ? content : resize_image(content, size);
  auto s = (style.sizes() == c.sizes()) ? style : resize_image(style, static_cast<int>(c.size(1)));
  if (s.sizes() != c.sizes()) throw ResolutionError("style could not be resized to the content resolution");
  if (color_match) c = match_colors(c, s);
  return {c, s};
}

torch::Tensor Pipeline::stylize(const torch::Tensor& content, const torch::Tensor& style,
                                const StylizeOptions& options) const {
  options.validate(steps());
  auto [c, s] = prepare(content, style, options.color_match);
  return render_with(stylizer_, prepare_inversions(stylizer_, c, s), options);
}

torch::Tensor Pipeline::stylize(const StylizeRequest& request) const {
  auto content = read_png(request.content);
  auto style = read_png(request.style);
  auto out = stylize(content, style, request.options);
  if (!request.output.empty()) {
    const auto dir = result_dir(request.output, request.content, request.style);
    std::filesystem::create_directories(dir);
    const int size = static_cast<int>(out.size(1));
    write_png(dir / "stylized.png", out);
    write_png(dir / "content.png", content.size(1) == size && content.size(2) == size ? content : resize_image(content, size));
    write_png(dir / "style.png", style.size(1) == size && style.size(2) == size ? style : resize_image(style, size));
    auto meta = request.to_json();
    const auto w = request.options.window(steps());
    meta["resolved"] = {{"noise_start", w.start_step},
                        {"noise_end", w.end_step},
                        {"attn_stop", request.options.stop(steps())},
                        {"steps", steps()}};
    meta["backbone_fingerprint"] = stylizer_.backbone().fingerprint();
    meta["encoder"] = stylizer_.encoder().id();
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  }
  return out;
}

SweepResult Pipeline::sweep(const torch::Tensor& content, const torch::Tensor& style, const StylizeOptions& base,
                            SweepAxis axis, const std::vector<int>& values) const {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (!std::is_sorted(values.begin(), values.end())) throw ConfigError("sweep values must be sorted ascending");
  base.validate(steps());

  std::vector<StylizeOptions> runs;
  std::vector<int> bad;
  for (int v : values) {
    auto o = base;
    if (axis == SweepAxis::kNoiseStart) o.noise_start = v;
    else o.attn_stop = v;
    try {
      o.validate(steps());
      runs.push_back(o);
    } catch (const ConfigError&) {
      bad.push_back(v);
    }
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << to_string(axis) << " values out of range:";
    for (int v : bad) msg << ' ' << v;
    throw ConfigError(msg.str());
  }

  auto [c, s] = prepare(content, style, base.color_match);
  const auto prepared = prepare_inversions(stylizer_, c, s);
  SweepResult result;
  result.values = values;
  for (const auto& o : runs) result.images.push_back(render_with(stylizer_, prepared, o));
  result.grid = hconcat(result.images);
  return result;
}

InterpolationTraces Pipeline::interpolation_traces(const torch::Tensor& content, const torch::Tensor& style,
                                                   const StylizeOptions& options) const {
  options.validate(steps());
  torch::NoGradGuard no_grad;
  auto [c, s] = prepare(content, style, options.color_match);
  auto p = prepare_inversions(stylizer_, c, s);
  InterpolationTraces t;
  t.window = options.window(steps());
  t.content_trace = std::move(*stylizer_.reconstruct(p.content, t.window, true).attention);
  t.stylized_trace =
      std::move(*stylizer_.render(p.content, p.style.attention, p.code, t.window, options.stop(steps()), true).attention);
  t.content = std::move(p.content);
  return t;
}

torch::Tensor Pipeline::v_interpolate(const InterpolationTraces& traces, double alpha) const {
  torch::NoGradGuard no_grad;
  auto reversed = interpolate_v(stylizer_.sampler(), traces.content.terminal, &traces.content.noise, traces.window,
                                traces.content_trace, traces.stylized_trace, alpha);
  return stylizer_.backbone().decode(reversed.latent).clamp(0.0, 1.0);
}

Heatmap Pipeline::attention_heatmap(const torch::Tensor& content, const torch::Tensor& style,
                                    const StylizeOptions& options) const {
  auto traces = interpolation_traces(content, style, options);
  AttentionTrace plain(traces.content_trace.source_fingerprint(), traces.content_trace.steps());
  for (const auto& [key, v] : traces.stylized_trace.entries()) {
    plain.insert(key.first, key.second, traces.content_trace.at(key.first, key.second));
  }
  return attention_diff_heatmap(plain, traces.stylized_trace);
}

}  // namespace diffnst
