#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "diffnst/backbone.hpp"
#include "diffnst/corpus.hpp"
#include "diffnst/random.hpp"

namespace diffnst::testing {

// Desk-sized backbone used across unit tests: 64px images, 16x16 latents,
// narrow UNet and a 10-step sampler.
inline BackboneConfig small_config() {
  BackboneConfig c;
  c.image_size = 64;
  c.unet_channel_widths = {32, 64, 128};
  c.sampling_steps = 10;
  return c;
}

// Randomly initialised (untrained) but frozen backbone shared by tests.
inline std::shared_ptr<Backbone> shared_backbone() {
  static auto backbone = [] {
    auto b = std::make_shared<Backbone>(small_config(), 7);
    b->freeze();
    return b;
  }();
  return backbone;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline double rel_l2(const torch::Tensor& estimate, const torch::Tensor& reference) {
  auto ref = reference.to(torch::kFloat64);
  return (estimate.to(torch::kFloat64) - ref).norm().item<double>() / ref.norm().item<double>();
}

inline torch::Tensor content_fixture(uint64_t seed = 1, int size = 64) { return toy_content_image(seed, size); }
inline torch::Tensor style_fixture(uint64_t seed = 2, int size = 64) { return toy_style_image(seed, size); }

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path = std::filesystem::temp_directory_path() / ("diffnst_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace diffnst::testing
