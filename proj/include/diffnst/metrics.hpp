#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "diffnst/features.hpp"
#include "json.hpp"

namespace diffnst {

struct MetricsConfig {
  int sifid_layer = 1;
  int chamfer_samples = 4096;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static MetricsConfig from_json(const nlohmann::json& j);
};

// Frechet distance between Gaussians fitted to the per-location feature
// vectors of one extractor layer.
double sifid(const FeatureExtractor& extractor, const torch::Tensor& a, const torch::Tensor& b, int layer);

// Symmetric mean nearest-neighbour RGB distance between seeded pixel samples.
// sample_n at or above the pixel count uses every pixel.
double chamfer_color(const torch::Tensor& a, const torch::Tensor& b, int sample_n = 4096, uint64_t seed = 0);

// Mean L2 distance between unit-normalised per-location feature vectors, averaged over layers.
double perceptual_distance(const FeatureExtractor& extractor, const torch::Tensor& a, const torch::Tensor& b);

struct PairMetrics {
  std::string id;
  std::string content;
  std::string style;
  double sifid = 0.0;
  double chamfer = 0.0;
  double perceptual = 0.0;
};

struct MetricReport {
  std::vector<PairMetrics> pairs;
  double mean_sifid = 0.0;
  double mean_chamfer = 0.0;
  double mean_perceptual = 0.0;
  int skipped = 0;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
  void save(const std::filesystem::path& path) const;
};

// Arithmetic means over pairs; zero when empty.
void finalize_means(MetricReport& report);

// Scores every <dir>/<content>__<style>/ holding stylized.png plus content.png
// and style.png (or the paths recorded in meta.json). SIFID and Chamfer
// compare against the style, the perceptual distance against the content.
MetricReport evaluate_corpus(const std::filesystem::path& results_dir, const MetricsConfig& config = {},
                             std::shared_ptr<const FeatureExtractor> extractor = nullptr);

}  // namespace diffnst
