#include "diffnst/hijack.hpp"

#include <algorithm>

#include "diffnst/error.hpp"

namespace diffnst {

nlohmann::json HijackOptions::to_json() const {
  return {{"hidden_multipliers", hidden_multipliers},
          {"residual", residual},
          {"zero_init_final", zero_init_final},
          {"code_dim", code_dim}};
}

HijackOptions HijackOptions::from_json(const nlohmann::json& j) {
  HijackOptions o;
  o.hidden_multipliers = j.value("hidden_multipliers", o.hidden_multipliers);
  o.residual = j.value("residual", o.residual);
  o.zero_init_final = j.value("zero_init_final", o.zero_init_final);
  o.code_dim = j.value("code_dim", o.code_dim);
  return o;
}

HijackMLPImpl::HijackMLPImpl(int v_dim, const HijackOptions& options) : v_dim_(v_dim), residual_(options.residual) {
  if (v_dim < 1 || options.code_dim < 1) throw ConfigError("hijack dimensions must be positive");
  layers_ = register_module("layers", torch::nn::Sequential());
  int in = 2 * v_dim + options.code_dim;
  for (int mult : options.hidden_multipliers) {
    if (mult < 1) throw ConfigError("hidden multipliers must be positive");
    layers_->push_back(torch::nn::Linear(in, mult * v_dim));
    layers_->push_back(torch::nn::SiLU());
    in = mult * v_dim;
  }
  torch::nn::Linear last(in, v_dim);
  if (options.zero_init_final) {
    torch::NoGradGuard no_grad;
    last->weight.zero_();
    last->bias.zero_();
  }
  layers_->push_back(last);
}

torch::Tensor HijackMLPImpl::forward(const torch::Tensor& content_v, const torch::Tensor& style_v,
                                     const torch::Tensor& code) {
  auto style = style_v.to(content_v.dtype()).expand_as(content_v);
  auto c = code.to(content_v.dtype()).view({1, 1, -1}).expand({content_v.size(0), content_v.size(1), -1});
  auto out = layers_->forward(torch::cat({content_v, style, c}, -1));
  return residual_ ? content_v + out : out;
}

HijackSet::HijackSet(const std::vector<AttentionSite>& sites, HijackOptions options)
    : options_(std::move(options)), root_(std::make_shared<torch::nn::Module>()) {
  std::copy_if(sites.begin(), sites.end(), std::back_inserter(sites_),
               [](const AttentionSite& s) { return s.half == Half::kDecoderUp; });
  if (sites_.empty()) throw ConfigError("no decoder attention sites to hijack");
  for (const auto& s : sites_) {
    // Module names may not contain '.'.
    std::string name = s.site_id;
    std::replace(name.begin(), name.end(), '.', '_');
    mlps_.push_back(root_->register_module(name, HijackMLP(s.v_dim, options_)));
  }
}

HijackSet build_hijack(const std::vector<AttentionSite>& sites, HijackOptions options) {
  return HijackSet(sites, std::move(options));
}

std::vector<std::string> HijackSet::site_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : sites_) ids.push_back(s.site_id);
  return ids;
}

HijackMLP HijackSet::mlp(const std::string& site_id) const {
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    if (sites_[i].site_id == site_id) return mlps_[i];
  }
  throw HookError("no hijack MLP for site " + site_id);
}

torch::Tensor HijackSet::hijack_v(const std::string& site_id, int step, const torch::Tensor& content_v,
                                  const AttentionTrace& style_trace, const StyleCode& code) const {
  auto net = mlp(site_id);
  const auto& style_v = style_trace.at(site_id, step);
  if (content_v.dim() != 3 || style_v.dim() != 3) throw ConfigError("V tensors must be [B,N,C]");
  if (style_v.size(1) != content_v.size(1) || style_v.size(2) != content_v.size(2)) {
    throw ResolutionError("token grid mismatch at " + site_id + ": content " + std::to_string(content_v.size(1)) +
                          "x" + std::to_string(content_v.size(2)) + ", style " + std::to_string(style_v.size(1)) +
                          "x" + std::to_string(style_v.size(2)));
  }
  if (code.dim() != options_.code_dim) {
    throw ConfigError("style code has dimension " + std::to_string(code.dim()) + ", hijack expects " +
                      std::to_string(options_.code_dim));
  }
  return net->forward(content_v, style_v, code.values);
}

std::vector<torch::Tensor> HijackSet::parameters() const { return root_->parameters(); }

int64_t HijackSet::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : root_->parameters()) n += p.numel();
  return n;
}

NamedTensors HijackSet::named_state() const {
  NamedTensors out;
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    for (const auto& item : mlps_[i]->named_parameters()) out.emplace_back(sites_[i].site_id + "/" + item.key(), item.value());
  }
  return out;
}

void HijackSet::load_state(const NamedTensors& state) {
  auto current = named_state();
  if (current.size() != state.size()) throw ConfigError("hijack state has the wrong number of tensors");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < current.size(); ++i) {
    if (current[i].first != state[i].first || current[i].second.sizes() != state[i].second.sizes()) {
      throw ConfigError("hijack state mismatch at " + state[i].first);
    }
    current[i].second.copy_(state[i].second);
  }
}

void HijackSet::train(bool on) { root_->train(on); }

AttentionPolicy wire_policy(const HijackSet& hijack, const AttentionTrace& style_trace, const StyleCode& code,
                            int stop_step, VTap tap) {
  if (!code.values.defined()) throw ConfigError("style code is empty");
  auto fn = [hijack, style_trace, code, tap = std::move(tap)](const AttentionSite& site, int step,
                                                               const torch::Tensor& v) {
    auto out = hijack.hijack_v(site.site_id, step, v, style_trace, code);
    if (tap) tap(site, step, out);
    return out;
  };
  return AttentionPolicy::replace(std::move(fn), stop_step, hijack.site_ids());
}

}  // namespace diffnst
