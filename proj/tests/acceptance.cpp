// Acceptance run: one PASS/FAIL line per criterion. The smoke-training
// criterion pretrains a toy backbone once and caches it under the cache dir.

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffnst/checkpoint.hpp"
#include "diffnst/corpus.hpp"
#include "diffnst/diffusion.hpp"
#include "diffnst/error.hpp"
#include "diffnst/hijack.hpp"
#include "diffnst/imageops.hpp"
#include "diffnst/losses.hpp"
#include "diffnst/metrics.hpp"
#include "diffnst/pipeline.hpp"
#include "diffnst/trainer.hpp"
#include "support.hpp"

using namespace diffnst;
using namespace diffnst::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects failed sub-checks; a criterion passes when none failed.
struct Outcome {
  std::vector<std::string> failures;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  bool passed() const { return failures.empty(); }
};

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

std::shared_ptr<Backbone> random_backbone(uint64_t seed = 7) {
  auto b = std::make_shared<Backbone>(small_config(), seed);
  b->freeze();
  return b;
}

Stylizer perturbed_stylizer(std::shared_ptr<const Backbone> bb, double perturb, uint64_t seed = 21) {
  auto hijack = build_hijack(bb->enumerate_attention_sites());
  if (perturb > 0.0) {
    auto state = hijack.named_state();
    uint64_t k = 0;
    for (auto& [name, t] : state) t = t + perturb * seeded_randn(t.sizes(), mix_seed(seed, k++));
    hijack.load_state(state);
  }
  return Stylizer(std::move(bb), std::move(hijack), make_stats_encoder());
}

double fd_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& fn, torch::Tensor x,
                         double h = 1e-6) {
  x = x.to(torch::kFloat64).detach().clone().requires_grad_(true);
  auto analytic = torch::autograd::grad({fn(x)}, {x})[0].detach();
  auto numeric = torch::zeros_like(analytic);
  auto flat = x.detach().clone().view(-1);
  auto num = numeric.view(-1);
  torch::NoGradGuard ng;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = fn(flat.view(x.sizes())).item<double>();
    flat[i] = orig - h;
    const double down = fn(flat.view(x.sizes())).item<double>();
    flat[i] = orig;
    num[i] = (up - down) / (2 * h);
  }
  return (analytic - numeric).norm().item<double>() / std::max(numeric.norm().item<double>(), 1e-8);
}

torch::Tensor rand_image(uint64_t seed, int size) {
  return torch::rand({3, size, size}, torch::Generator(at::detail::createCPUGenerator(seed)));
}

bool same_tensors(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || !torch::equal(a[i].second, b[i].second)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

void round_trip_inversion(Outcome& o) {
  const auto t0 = Clock::now();
  torch::NoGradGuard ng;
  auto bb = random_backbone();
  Sampler sampler(bb);
  double worst = 0.0;
  for (uint64_t i = 0; i < 10; ++i) {
    auto z = bb->encode(content_fixture(1000 + i));
    auto inv = sampler.invert(z);
    auto rec = sampler.reverse(inv.terminal, &inv.noise, InjectionWindow::full(sampler.steps())).latent;
    worst = std::max(worst, rel_l2(rec, z));
  }
  const double secs = seconds_since(t0);
  o.check(worst < 1e-4, "worst relative L2 " + fmt(worst));
  o.check(secs < 60.0, "took " + fmt(secs) + " s");
  o.detail << "10 images, worst rel L2 " << fmt(worst) << ", " << fmt(secs) << " s";
}

void capture_replay_identity(Outcome& o) {
  torch::NoGradGuard ng;
  auto bb = random_backbone();
  Sampler sampler(bb);
  auto replay_from = [](const AttentionTrace& trace) {
    return AttentionPolicy::replace(
        [&trace](const AttentionSite& site, int step, const torch::Tensor&) { return trace.at(site.site_id, step); });
  };

  auto recorded = sampler.generate(42, AttentionPolicy::record());
  o.check(torch::equal(recorded.latent, sampler.generate(42).latent), "recording changed the generation");
  o.check(torch::equal(sampler.generate(42, replay_from(*recorded.attention)).latent, recorded.latent),
          "generation replay differs");

  auto inv = sampler.invert(bb->encode(content_fixture(5)));
  auto window = InjectionWindow::scaled_default(sampler.steps());
  auto live = sampler.reverse(inv.terminal, &inv.noise, window, AttentionPolicy::record());
  o.check(torch::equal(sampler.reverse(inv.terminal, &inv.noise, window, replay_from(*live.attention)).latent,
                       live.latent),
          "windowed reverse replay differs");
  o.detail << "replayed " << recorded.attention->size() + live.attention->size() << " V entries, exact";
}

void hijack_init_identity(Outcome& o) {
  auto bb = random_backbone();
  Pipeline p(perturbed_stylizer(bb, 0.0));
  double worst = 0.0;
  for (uint64_t i = 0; i < 3; ++i) {
    auto content = content_fixture(200 + i), style = style_fixture(300 + i);
    auto out = p.stylize(content, style, {});
    auto matched = p.prepare(content, style, true).first;
    torch::NoGradGuard ng;
    auto recon = p.stylizer().reconstruct(p.stylizer().invert(matched), StylizeOptions{}.window(p.steps()));
    worst = std::max(worst, rel_l2(out, recon.image.clamp(0.0, 1.0)));
  }
  o.check(worst < 1e-4, "relative L2 to reconstruction " + fmt(worst));
  o.detail << "3 pairs, worst rel L2 to colour-matched reconstruction " << fmt(worst);
}

void loss_identities(Outcome& o) {
  auto ex = default_extractor();
  auto enc = make_stats_encoder();
  auto x = content_fixture(1, 32), y = style_fixture(2, 32);
  const double vals[] = {style_loss(*ex, x, x).item<double>(), perceptual_loss(*ex, x, x).item<double>(),
                         identity_losses(x, x, y, y).item<double>(), aladin_loss(*enc, x, x).item<double>()};
  const char* names[] = {"style", "perceptual", "identity", "aladin"};
  for (int i = 0; i < 4; ++i) o.check(std::abs(vals[i]) <= 1e-6, std::string(names[i]) + " = " + fmt(vals[i]));

  // The published weights, spelled out independently of the defaults.
  const std::map<std::string, double> lambda{{"style", 0.5},   {"adv", 5.0},       {"percep", 6.0},
                                             {"id_s", 100.0},  {"id_c", 100.0},    {"aladin", 10.0},
                                             {"s_contra", 1.0}, {"c_contra", 1.0}, {"p_simple", 10.0 * 0.25},
                                             {"p_complex", 10.0 * 0.75}};
  auto modules = LossModules::create(ex, enc, 12, 3);
  modules.to(torch::kFloat64);
  StylizationBatch b;
  b.content = x.to(torch::kFloat64);
  b.style = y.to(torch::kFloat64);
  b.stylized = 0.6 * b.content + 0.4 * b.style;
  b.style_identity = b.style * 0.9;
  b.content_identity = b.content * 0.95 + 0.02;
  for (int i = 0; i < 4; ++i) {
    b.contrastive.push_back({i / 2, i % 2, seeded_randn({12}, 40 + i).to(torch::kFloat64)});
  }
  b.crop_seed = 11;
  LossConfig cfg;
  cfg.crop_size = 8;
  cfg.crops_per_bin = 2;
  auto out = total_loss(b, modules, cfg);

  // Unweighted terms from the individual functions.
  const auto unit = LossWeights::unit();
  std::map<std::string, double> raw;
  raw["style"] = style_loss(*ex, b.stylized, b.style, unit).item<double>();
  auto domain = modules.domain;
  raw["adv"] = adversarial_losses([&](const torch::Tensor& i) { return domain->forward(i); }, b.style, b.stylized, unit)
                   .generator.item<double>();
  raw["percep"] = perceptual_loss(*ex, b.stylized, b.content, unit).item<double>();
  raw["id_s"] = identity_loss(b.style_identity, b.style, unit).item<double>();
  raw["id_c"] = identity_loss(b.content_identity, b.content, unit).item<double>();
  raw["aladin"] = aladin_loss(*enc, b.stylized, b.style, unit).item<double>();
  std::vector<ContrastiveItem> items;
  for (const auto& s : b.contrastive) {
    items.push_back({s.style_id, s.content_id, modules.style_head->forward(s.descriptor),
                     modules.content_head->forward(s.descriptor)});
  }
  auto contra = contrastive_losses(items, unit);
  raw["s_contra"] = contra.style.item<double>();
  raw["c_contra"] = contra.content.item<double>();
  auto cfg_unit = cfg;
  cfg_unit.weights = unit;
  auto patch = modules.patch;
  auto p = patch_losses([&](const torch::Tensor& q, const torch::Tensor& r) { return patch->forward(q, r); },
                        b.stylized, b.style, cfg_unit, b.crop_seed);
  raw["p_simple"] = p.simple.item<double>();
  raw["p_complex"] = p.complex.item<double>();

  o.check(out.terms.size() == 10, "expected 10 terms");
  double expected_total = 0.0, breakdown_sum = 0.0, worst = 0.0;
  for (const auto& [name, value] : out.terms) {
    const double want = lambda.at(name) * raw.at(name);
    const double err = std::abs(value.item<double>() - want);
    worst = std::max(worst, err);
    o.check(err <= 1e-6, name + " off by " + fmt(err));
    expected_total += want;
    breakdown_sum += value.item<double>();
  }
  const double total = out.total.item<double>();
  o.check(std::abs(total - expected_total) <= 1e-6, "total " + fmt(total) + " vs weighted sum " + fmt(expected_total));
  o.check(std::abs(total - breakdown_sum) <= 1e-6, "breakdown does not sum");
  o.detail << "identity terms <= 1e-6; total " << fmt(total) << " matches lambda-weighted sum (worst term error "
           << fmt(worst) << ")";
}

void gradient_integrity(Outcome& o) {
  auto ex = default_extractor();
  auto enc = make_stats_encoder();
  auto other = rand_image(7, 4).to(torch::kFloat64);
  auto x0 = rand_image(8, 4);
  std::map<std::string, double> err;
  err["style"] = fd_relative_error([&](const torch::Tensor& x) { return style_loss(*ex, x, other); }, x0);
  err["percep"] = fd_relative_error([&](const torch::Tensor& x) { return perceptual_loss(*ex, x, other); }, x0);
  err["identity"] =
      fd_relative_error([&](const torch::Tensor& x) { return identity_losses(x, other, other * 0.5, x * 0.5); }, x0);
  err["aladin"] = fd_relative_error([&](const torch::Tensor& x) { return aladin_loss(*enc, x, other); }, x0);

  auto modules = LossModules::create(ex, enc, 6, 3);
  modules.to(torch::kFloat64);
  auto domain = modules.domain;
  err["adv"] = fd_relative_error(
      [&](const torch::Tensor& x) {
        return adversarial_losses([&](const torch::Tensor& i) { return domain->forward(i); }, other, x).generator;
      },
      x0);
  auto patch = modules.patch;
  LossConfig pc;
  pc.crop_size = 4;
  pc.crops_per_bin = 1;
  pc.crop_candidates = 4;
  err["patch"] = fd_relative_error(
      [&](const torch::Tensor& x) {
        auto t = patch_losses([&](const torch::Tensor& q, const torch::Tensor& r) { return patch->forward(q, r); }, x,
                              other, pc, 3);
        return t.simple + t.complex;
      },
      x0);
  std::vector<torch::Tensor> descs;
  for (int i = 0; i < 4; ++i) descs.push_back(seeded_randn({6}, 60 + i).to(torch::kFloat64));
  err["contrastive"] = fd_relative_error(
      [&](const torch::Tensor& d0) {
        std::vector<ContrastiveItem> items;
        for (int i = 0; i < 4; ++i) {
          const auto& d = i == 0 ? d0 : descs[static_cast<std::size_t>(i)];
          items.push_back({i / 2, i % 2, modules.style_head->forward(d), modules.content_head->forward(d)});
        }
        auto t = contrastive_losses(items);
        return t.style + t.content;
      },
      descs[0]);
  double worst = 0.0;
  for (const auto& [name, e] : err) {
    o.check(e < 1e-3, name + " finite-difference error " + fmt(e));
    worst = std::max(worst, e);
  }

  TrainConfig tc;
  tc.max_steps = 0;
  tc.checkpoint_every = 0;
  tc.seed = 5;
  auto bb = random_backbone(11);
  std::vector<torch::Tensor> contents, styles;
  for (uint64_t i = 0; i < 8; ++i) contents.push_back(content_fixture(400 + i));
  for (uint64_t i = 0; i < 4; ++i) styles.push_back(style_fixture(500 + i));
  const auto before = bb->parameter_checksum();
  Trainer trainer(tc, bb, contents, styles);
  for (int i = 0; i < 50; ++i) trainer.step();
  o.check(bb->parameter_checksum() == before, "backbone checksum changed");
  o.check(trainer.generator_optimizer().updates() > 0, "no optimizer update happened");
  o.detail << "7 loss families, worst FD error " << fmt(worst) << "; checksum stable over 50 steps ("
           << trainer.generator_optimizer().updates() << " updates)";
}

void control_semantics(Outcome& o) {
  auto bb = random_backbone();
  Pipeline p(perturbed_stylizer(bb, 0.05));
  const int t = p.steps();
  auto content = content_fixture(1), style = style_fixture(2);

  StylizeOptions off;
  off.attn_stop = 0;
  auto out = p.stylize(content, style, off);
  auto matched = p.prepare(content, style, true).first;
  {
    torch::NoGradGuard ng;
    auto recon = p.stylizer().reconstruct(p.stylizer().invert(matched), off.window(t)).image.clamp(0.0, 1.0);
    o.check(torch::equal(out, recon), "attn_stop=0 differs from the reconstruction");
  }

  const std::vector<InjectionWindow> windows{{4, 6}, {3, 7}, {2, 8}, {1, 9}, {0, t}};
  std::vector<double> mean(windows.size(), 0.0);
  {
    torch::NoGradGuard ng;
    for (uint64_t seed = 0; seed < 5; ++seed) {
      auto inv = p.stylizer().invert(content_fixture(100 + seed));
      for (std::size_t i = 0; i < windows.size(); ++i) {
        mean[i] += rel_l2(p.stylizer().reconstruct(inv, windows[i]).latent, inv.latent) / 5.0;
      }
    }
  }
  for (std::size_t i = 1; i < windows.size(); ++i) {
    o.check(mean[i] <= mean[i - 1] + 1e-9, "error rose when widening to [" + std::to_string(windows[i].start_step) +
                                               "," + std::to_string(windows[i].end_step) + ")");
  }

  StylizeOptions def;
  auto traces = p.interpolation_traces(content, style, def);
  torch::Tensor plain;
  {
    torch::NoGradGuard ng;
    plain = p.stylizer().reconstruct(traces.content, traces.window).image.clamp(0.0, 1.0);
  }
  o.check(torch::equal(p.v_interpolate(traces, 0.0), plain), "alpha=0 differs from the content generation");
  o.check(torch::equal(p.v_interpolate(traces, 1.0), p.stylize(content, style, def)),
          "alpha=1 differs from the stylized generation");
  o.detail << "window errors";
  for (double m : mean) o.detail << ' ' << fmt(m);
  o.detail << " (5 seeds); endpoints exact";
}

// Cached pretrained backbone and corpus for the smoke run.
struct SmokeAssets {
  fs::path backbone_dir;
  ToyCorpusPaths train;
  ToyCorpusPaths holdout;
  PretrainReport report;
  bool reused = false;
};

SmokeAssets smoke_assets(const fs::path& cache) {
  SmokeAssets a;
  a.train = write_toy_corpus(cache / "corpus", 200, 60, 64, 1);
  a.holdout = write_toy_corpus(cache / "holdout", 20, 20, 64, 9001);
  a.backbone_dir = cache / "backbone";
  PretrainConfig pc;
  pc.backbone = small_config();
  pc.seed = 1;
  const auto stamp = a.backbone_dir / "pretrain.json";
  if (fs::exists(stamp)) {
    std::ifstream in(stamp);
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.value("config", nlohmann::json()) == pc.to_json()) {
      a.report.holdout_mae = j.at("report").at("holdout_mae").get<double>();
      a.reused = true;
      return a;
    }
  }
  auto images = load_image_dir(a.train.content_dir, 64);
  auto styles = load_image_dir(a.train.style_dir, 64);
  images.insert(images.end(), styles.begin(), styles.end());
  auto bb = pretrain_backbone(images, pc, &a.report, &std::cerr);
  fs::remove_all(a.backbone_dir);
  bb->save(a.backbone_dir);
  std::ofstream(stamp) << nlohmann::json{{"config", pc.to_json()}, {"report", a.report.to_json()}}.dump(2);
  return a;
}

void smoke_training(Outcome& o, const fs::path& cache, const nlohmann::json& overrides) {
  const auto t0 = Clock::now();
  auto assets = smoke_assets(cache);
  const double pretrain_secs = seconds_since(t0);

  TrainConfig tc;
  tc.content_root = assets.train.content_dir;
  tc.style_root = assets.train.style_dir;
  tc.backbone = assets.backbone_dir;
  tc.output_dir = cache / "smoke_run";
  tc.max_steps = 500;
  tc.checkpoint_every = 0;
  tc.seed = 1;
  if (!overrides.empty()) {
    auto merged = tc.to_json();
    merged.merge_patch(overrides);
    tc = TrainConfig::from_json(merged);
  }
  fs::remove_all(tc.output_dir);
  const auto t1 = Clock::now();
  auto result = train(tc, &std::cerr);
  const double train_secs = seconds_since(t1);

  // Mean total over the first and last 50 micro-steps.
  const auto& r = result.records;
  const std::size_t w = 50;
  o.check(static_cast<int64_t>(r.size()) == tc.max_steps, "logged " + std::to_string(r.size()) + " steps");
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < w && i < r.size(); ++i) head += r[i].total / w;
  for (std::size_t i = r.size() >= w ? r.size() - w : 0; i < r.size(); ++i) tail += r[i].total / w;
  const double drop = (head - tail) / head;
  o.check(drop >= 0.20, "smoothed total loss dropped " + fmt(100 * drop) + "%");

  auto pipeline = Pipeline::load(tc.output_dir / "final");
  auto contents = load_image_dir(assets.holdout.content_dir, 64);
  auto styles = load_image_dir(assets.holdout.style_dir, 64);
  const auto& ex = *default_extractor();
  int wins = 0;
  for (std::size_t i = 0; i < contents.size(); ++i) {
    auto stylized = pipeline.stylize(contents[i], styles[i], {});
    auto matched = pipeline.prepare(contents[i], styles[i], true).first;
    torch::NoGradGuard ng;
    const double ls = style_loss(ex, stylized, styles[i]).item<double>();
    const double lm = style_loss(ex, matched, styles[i]).item<double>();
    if (ls < lm) ++wins;
  }
  const double rate = static_cast<double>(wins) / static_cast<double>(contents.size());
  o.check(contents.size() == 20, "held-out pairs: " + std::to_string(contents.size()));
  o.check(rate >= 0.60, "style-loss wins " + std::to_string(wins) + "/20");
  const double hours = seconds_since(t0) / 3600.0;
  o.check(hours <= 12.0, "took " + fmt(hours) + " h");
  o.detail << "loss " << fmt(head) << " -> " << fmt(tail) << " (" << fmt(100 * drop) << "% drop), style wins " << wins
           << "/" << contents.size() << ", backbone MAE " << fmt(assets.report.holdout_mae)
           << (assets.reused ? " (cached)" : " (pretrained in " + fmt(pretrain_secs) + " s)") << ", training "
           << fmt(train_secs) << " s";
}

torch::Tensor two_point_image(double mu, double sigma) {
  auto img = torch::zeros({3, 8, 8}, torch::kFloat64);
  img[0].narrow(0, 0, 4).fill_(mu - sigma);
  img[0].narrow(0, 4, 4).fill_(mu + sigma);
  return img;
}

torch::Tensor solid(double r, double g, double b, int size) {
  return torch::tensor({r, g, b}, torch::kFloat32).view({3, 1, 1}).expand({3, size, size}).contiguous();
}

class RedChannel final : public FeatureExtractor {
 public:
  std::vector<torch::Tensor> features(const torch::Tensor& images) const override {
    return {as_batch(images).narrow(1, 0, 1)};
  }
  int perceptual_layer() const override { return 0; }
  std::string id() const override { return "red"; }
};

void metric_oracles(Outcome& o) {
  auto ex = default_extractor();
  auto a = content_fixture(11), b = style_fixture(12);

  const double s_aa = sifid(*ex, a, a, 1), s_ab = sifid(*ex, a, b, 1), s_ba = sifid(*ex, b, a, 1);
  o.check(std::abs(s_aa) <= 1e-6, "sifid(a,a) = " + fmt(s_aa));
  o.check(std::abs(s_ab - s_ba) <= 1e-6 * std::max(1.0, s_ab), "sifid asymmetric");
  o.check(s_ab >= 0.0, "sifid negative");
  RedChannel red;
  const double m1 = 0.5, sd1 = 0.1, m2 = 0.3, sd2 = 0.2;
  const double s_closed = (m1 - m2) * (m1 - m2) + (sd1 - sd2) * (sd1 - sd2);
  o.check(std::abs(sifid(red, two_point_image(m1, sd1), two_point_image(m2, sd2), 0) - s_closed) <= 1e-6,
          "sifid scalar closed form");

  const double c_aa = chamfer_color(a, a, 4096), c_ab = chamfer_color(a, b, 4096), c_ba = chamfer_color(b, a, 4096);
  o.check(c_aa <= 1e-6, "chamfer(a,a) = " + fmt(c_aa));
  o.check(std::abs(c_ab - c_ba) <= 1e-6, "chamfer asymmetric");
  o.check(c_ab >= 0.0, "chamfer negative");
  o.check(std::abs(chamfer_color(solid(1, 0, 0, 8), solid(0, 0, 1, 8), 64) - std::sqrt(2.0)) <= 1e-6,
          "chamfer red/blue closed form");

  const double p_aa = perceptual_distance(*ex, a, a), p_ab = perceptual_distance(*ex, a, b),
               p_ba = perceptual_distance(*ex, b, a);
  o.check(p_aa <= 1e-6, "perceptual(a,a) = " + fmt(p_aa));
  o.check(std::abs(p_ab - p_ba) <= 1e-6, "perceptual asymmetric");
  o.check(p_ab >= 0.0, "perceptual negative");
  IdentityExtractor id;
  auto x = solid(1, 0, 0, 2);
  auto y = torch::zeros({3, 2, 2});
  y[0][0][0] = 1;
  y[1][0][1] = 1;
  y[0][1][0] = 1, y[1][1][0] = 1;
  y[2][1][1] = 1;
  const double p_closed = (0.0 + std::sqrt(2.0) + std::sqrt(2.0 - std::sqrt(2.0)) + std::sqrt(2.0)) / 4.0;
  o.check(std::abs(perceptual_distance(id, x, y) - p_closed) <= 1e-6, "perceptual 2x2 closed form");
  o.detail << "sifid " << fmt(s_ab) << ", chamfer " << fmt(c_ab) << ", perceptual " << fmt(p_ab)
           << " on a fixture pair; closed forms within 1e-6";
}

void moment_matching(Outcome& o) {
  double worst = 0.0;
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    auto content = 0.3 + 0.4 * content_fixture(seed);
    auto style = 0.35 + 0.3 * style_fixture(seed + 10);
    auto out = match_colors(content, style, false);
    o.check(out.min().item<float>() >= 0.0f && out.max().item<float>() <= 1.0f, "fixture clipped");
    auto got = color_stats(out), want = color_stats(style);
    worst = std::max({worst, max_abs_diff(got.mean, want.mean), max_abs_diff(got.covariance, want.covariance)});
  }
  o.check(worst < 1e-3, "moment error " + fmt(worst));

  // One channel: out = (c - mu_c) * sigma_s / sigma_c + mu_s.
  auto c = torch::tensor({0.1f, 0.2f, 0.4f, 0.5f}).view({1, 1, 4});
  auto s = torch::tensor({0.3f, 0.6f, 0.6f, 0.9f}).view({1, 1, 4});
  const double mc = 0.3, sc = std::sqrt((0.04 + 0.01 + 0.01 + 0.04) / 4.0);
  const double ms = 0.6, ss = std::sqrt((0.09 + 0.0 + 0.0 + 0.09) / 4.0);
  auto out = match_colors(c, s, false);
  const double cv[] = {0.1, 0.2, 0.4, 0.5};
  double closed = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double want = (cv[i] - mc) * ss / sc + ms;
    closed = std::max(closed, std::abs(out[0][0][i].item<double>() - want));
  }
  o.check(closed <= 1e-6, "1-channel closed form error " + fmt(closed));
  o.detail << "5 fixtures, worst moment error " << fmt(worst) << "; 1-channel oracle error " << fmt(closed);
}

void persistence(Outcome& o) {
  TempDir tmp("acceptance_persist");
  auto bb = random_backbone();
  TrainConfig tc;
  tc.grad_accumulation = 2;
  tc.max_steps = 0;
  tc.checkpoint_every = 0;
  tc.seed = 3;
  std::vector<torch::Tensor> contents, styles;
  for (uint64_t i = 0; i < 4; ++i) contents.push_back(content_fixture(i));
  for (uint64_t i = 0; i < 3; ++i) styles.push_back(style_fixture(50 + i));

  std::vector<double> totals;
  {
    Trainer straight(tc, bb, contents, styles);
    for (int i = 0; i < 6; ++i) totals.push_back(straight.step().total);
  }
  Checkpoint saved;
  {
    Trainer first(tc, bb, contents, styles);
    for (int i = 0; i < 2; ++i) first.step();
    saved = first.checkpoint();
    saved.save(tmp.path / "ck");
  }
  auto loaded = Checkpoint::load(tmp.path / "ck");
  o.check(same_tensors(loaded.hijack, saved.hijack), "hijack tensors differ after reload");
  o.check(same_tensors(loaded.loss_modules, saved.loss_modules), "loss modules differ after reload");
  o.check(same_tensors(loaded.optimizer, saved.optimizer), "optimizer state differs after reload");
  o.check(same_tensors(loaded.encoder, saved.encoder), "encoder differs after reload");
  o.check(loaded.optimizer_meta == saved.optimizer_meta && loaded.step == saved.step, "checkpoint meta differs");
  o.check(loaded.backbone->parameter_checksum() == bb->parameter_checksum(), "backbone differs after reload");

  {
    torch::NoGradGuard ng;
    Sampler sampler(bb);
    auto inv = sampler.invert(bb->encode(content_fixture(6)), AttentionPolicy::record());
    inv.noise.save(tmp.path / "noise");
    inv.attention->save(tmp.path / "attention");
    auto noise = NoiseTrace::load(tmp.path / "noise");
    auto att = AttentionTrace::load(tmp.path / "attention");
    bool exact = noise.steps() == inv.noise.steps() && torch::equal(noise.origin_latent, inv.noise.origin_latent) &&
                 att.same_grid(*inv.attention);
    for (int s = 0; exact && s < noise.steps(); ++s) exact = torch::equal(noise.noises[s], inv.noise.noises[s]);
    for (const auto& [key, v] : inv.attention->entries()) exact = exact && torch::equal(att.at(key.first, key.second), v);
    o.check(exact, "trace reload is not bit-exact");
  }

  Trainer resumed(tc, bb, contents, styles);
  resumed.restore(loaded);
  double worst = 0.0;
  for (std::size_t i = 2; i < totals.size(); ++i) worst = std::max(worst, std::abs(resumed.step().total - totals[i]));
  o.check(worst < 1e-5, "resumed losses differ by " + fmt(worst));
  o.detail << "checkpoint and traces bit-exact; resumed run within " << fmt(worst) << " over 4 steps";
}

struct Criterion {
  int id;
  std::string name;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffnst acceptance criteria"};
  std::string cache = DIFFNST_ACCEPTANCE_CACHE;
  std::vector<int> only;
  std::string smoke_config;
  app.add_option("--cache", cache, "directory for the pretrained toy backbone and corpora");
  app.add_option("--smoke-config", smoke_config, "JSON patch applied to the smoke-training config");
  app.add_option("--only", only, "criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);
  torch::manual_seed(0);
  nlohmann::json smoke_overrides = nlohmann::json::object();
  if (!smoke_config.empty()) {
    std::ifstream in(smoke_config);
    smoke_overrides = nlohmann::json::parse(in);
  }

  const std::vector<Criterion> criteria{
      {1, "round-trip inversion", round_trip_inversion},
      {2, "capture/replay identity", capture_replay_identity},
      {3, "hijack initialization identity", hijack_init_identity},
      {4, "loss identities and weighted total", loss_identities},
      {5, "gradient integrity and frozen backbone", gradient_integrity},
      {6, "control semantics", control_semantics},
      {7, "smoke training", [&](Outcome& o) { smoke_training(o, cache, smoke_overrides); }},
      {8, "metric oracles", metric_oracles},
      {9, "moment matching", moment_matching},
      {10, "persistence and resume", persistence},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool ok = o.passed();
    failed += ok ? 0 : 1;
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << o.detail.str();
    for (const auto& f : o.failures) std::cout << " | " << f;
    std::cout << " [" << fmt(seconds_since(t0)) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
