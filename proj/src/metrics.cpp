#include "diffnst/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "diffnst/error.hpp"
#include "diffnst/image_io.hpp"
#include "diffnst/random.hpp"

namespace diffnst {

namespace {

torch::Tensor layer_vectors(const FeatureExtractor& extractor, const torch::Tensor& image, int layer) {
  torch::NoGradGuard no_grad;
  auto features = extractor.features(as_batch(image));
  if (layer < 0 || layer >= static_cast<int>(features.size())) {
    throw ConfigError("feature layer " + std::to_string(layer) + " out of range");
  }
  const auto& f = features[static_cast<std::size_t>(layer)];
  return f[0].reshape({f.size(1), -1}).t().to(torch::kFloat64);  // [N, C]
}

std::pair<torch::Tensor, torch::Tensor> gaussian(const torch::Tensor& vectors) {
  auto mean = vectors.mean(0);
  auto centered = vectors - mean;
  auto cov = centered.t().matmul(centered) / static_cast<double>(vectors.size(0));
  return {mean, 0.5 * (cov + cov.t())};
}

torch::Tensor psd_sqrt(const torch::Tensor& sym) {
  auto [evals, evecs] = torch::linalg_eigh(0.5 * (sym + sym.t()));
  return evecs.matmul(torch::diag(evals.clamp_min(0.0).sqrt())).matmul(evecs.t());
}

torch::Tensor pixel_sample(const torch::Tensor& image, int n, uint64_t seed) {
  auto pixels = image.detach().reshape({image.size(0), -1}).t().to(torch::kFloat64);  // [P, C]
  if (n >= pixels.size(0)) return pixels;
  auto gen = make_generator(seed);
  auto index = torch::randperm(pixels.size(0), gen, torch::kLong).narrow(0, 0, n);
  return pixels.index_select(0, index);
}

double mean_nearest(const torch::Tensor& from, const torch::Tensor& to) {
  double sum = 0.0;
  for (int64_t start = 0; start < from.size(0); start += 1024) {
    auto block = from.narrow(0, start, std::min<int64_t>(1024, from.size(0) - start));
    sum += torch::cdist(block, to).amin(1).sum().item<double>();
  }
  return sum / static_cast<double>(from.size(0));
}

}  // namespace

nlohmann::json MetricsConfig::to_json() const {
  return {{"sifid_layer", sifid_layer}, {"chamfer_samples", chamfer_samples}, {"seed", seed}};
}

MetricsConfig MetricsConfig::from_json(const nlohmann::json& j) {
  MetricsConfig c;
  c.sifid_layer = j.value("sifid_layer", c.sifid_layer);
  c.chamfer_samples = j.value("chamfer_samples", c.chamfer_samples);
  c.seed = j.value("seed", c.seed);
  if (c.chamfer_samples < 1) throw ConfigError("chamfer_samples must be positive");
  return c;
}

double sifid(const FeatureExtractor& extractor, const torch::Tensor& a, const torch::Tensor& b, int layer) {
  auto [mu_a, cov_a] = gaussian(layer_vectors(extractor, a, layer));
  auto [mu_b, cov_b] = gaussian(layer_vectors(extractor, b, layer));
  // Tr((S_a S_b)^{1/2}) = Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), the symmetric form.
  auto root_a = psd_sqrt(cov_a);
  auto middle = root_a.matmul(cov_b).matmul(root_a);
  const double cross = torch::linalg_eigvalsh(0.5 * (middle + middle.t())).clamp_min(0.0).sqrt().sum().item<double>();
  const double d = (mu_a - mu_b).pow(2).sum().item<double>() + cov_a.trace().item<double>() +
                   cov_b.trace().item<double>() - 2.0 * cross;
  return std::max(d, 0.0);
}

double chamfer_color(const torch::Tensor& a, const torch::Tensor& b, int sample_n, uint64_t seed) {
  if (sample_n < 1) throw ConfigError("chamfer sample count must be positive");
  if (a.dim() != 3 || b.dim() != 3 || a.size(0) != b.size(0)) throw ConfigError("chamfer expects [C,H,W] images");
  auto pa = pixel_sample(a, sample_n, mix_seed(seed, 1));
  auto pb = pixel_sample(b, sample_n, mix_seed(seed, 2));
  return 0.5 * (mean_nearest(pa, pb) + mean_nearest(pb, pa));
}

double perceptual_distance(const FeatureExtractor& extractor, const torch::Tensor& a, const torch::Tensor& b) {
  torch::NoGradGuard no_grad;
  auto fa = extractor.features(as_batch(a).to(torch::kFloat64));
  auto fb = extractor.features(as_batch(b).to(torch::kFloat64));
  namespace F = torch::nn::functional;
  double total = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto na = F::normalize(fa[i], F::NormalizeFuncOptions().dim(1).eps(1e-10));
    auto nb = F::normalize(fb[i], F::NormalizeFuncOptions().dim(1).eps(1e-10));
    total += (na - nb).pow(2).sum(1).sqrt().mean().item<double>();
  }
  return total / static_cast<double>(fa.size());
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json pairs_json = nlohmann::json::array();
  for (const auto& p : pairs) {
    pairs_json.push_back({{"id", p.id},
                          {"content", p.content},
                          {"style", p.style},
                          {"sifid", p.sifid},
                          {"chamfer", p.chamfer},
                          {"perceptual", p.perceptual}});
  }
  return {{"pairs", pairs_json},
          {"means", {{"sifid", mean_sifid}, {"chamfer", mean_chamfer}, {"perceptual", mean_perceptual}}},
          {"count", pairs.size()},
          {"skipped", skipped},
          {"config", config}};
}

void MetricReport::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

void finalize_means(MetricReport& report) {
  report.mean_sifid = report.mean_chamfer = report.mean_perceptual = 0.0;
  if (report.pairs.empty()) return;
  for (const auto& p : report.pairs) {
    report.mean_sifid += p.sifid;
    report.mean_chamfer += p.chamfer;
    report.mean_perceptual += p.perceptual;
  }
  const double n = static_cast<double>(report.pairs.size());
  report.mean_sifid /= n;
  report.mean_chamfer /= n;
  report.mean_perceptual /= n;
}

MetricReport evaluate_corpus(const std::filesystem::path& results_dir, const MetricsConfig& config,
                             std::shared_ptr<const FeatureExtractor> extractor) {
  if (!extractor) extractor = default_extractor();
  MetricReport report;
  report.config = config.to_json();
  report.config["extractor"] = extractor->id();
  if (!std::filesystem::is_directory(results_dir)) throw IoError("no results directory: " + results_dir.string());

  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(results_dir)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());

  for (const auto& dir : dirs) {
    auto resolve = [&](const char* file, const char* meta_key) -> std::filesystem::path {
      if (std::filesystem::exists(dir / file)) return dir / file;
      if (std::filesystem::exists(dir / "meta.json")) {
        std::ifstream in(dir / "meta.json");
        auto meta = nlohmann::json::parse(in, nullptr, false);
        if (!meta.is_discarded() && meta.contains(meta_key)) {
          std::filesystem::path p = meta.at(meta_key).get<std::string>();
          if (std::filesystem::exists(p)) return p;
        }
      }
      return {};
    };
    const auto stylized_path = dir / "stylized.png";
    const auto content_path = resolve("content.png", "content");
    const auto style_path = resolve("style.png", "style");
    if (!std::filesystem::exists(stylized_path) || content_path.empty() || style_path.empty()) {
      std::cerr << "warning: skipping incomplete result " << dir.filename().string() << '\n';
      ++report.skipped;
      continue;
    }
    auto stylized = read_png(stylized_path);
    auto content = read_png(content_path);
    auto style = read_png(style_path);
    const int size = static_cast<int>(stylized.size(1));
    if (content.size(1) != size || content.size(2) != stylized.size(2)) content = resize_image(content, size);
    if (style.size(1) != size || style.size(2) != stylized.size(2)) style = resize_image(style, size);

    PairMetrics m;
    m.id = dir.filename().string();
    const auto split = m.id.find("__");
    m.content = split == std::string::npos ? content_path.stem().string() : m.id.substr(0, split);
    m.style = split == std::string::npos ? style_path.stem().string() : m.id.substr(split + 2);
    m.sifid = sifid(*extractor, stylized, style, config.sifid_layer);
    m.chamfer = chamfer_color(stylized, style, config.chamfer_samples, config.seed);
    m.perceptual = perceptual_distance(*extractor, stylized, content);
    report.pairs.push_back(m);
  }
  finalize_means(report);
  return report;
}

}  // namespace diffnst
