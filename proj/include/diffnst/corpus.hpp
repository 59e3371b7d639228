#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace diffnst {

// Procedural stand-ins for photo/artwork corpora at desk scale.

// Smooth gradient background with a few shaded geometric objects.
torch::Tensor toy_content_image(uint64_t seed, int size);
// Periodic or blobby texture over a small random palette, plus grain.
torch::Tensor toy_style_image(uint64_t seed, int size);

struct ToyCorpusPaths {
  std::filesystem::path content_dir;
  std::filesystem::path style_dir;
};

// Writes <root>/content/cNNNN.png and <root>/style/sNNNN.png.
ToyCorpusPaths write_toy_corpus(const std::filesystem::path& root, int content_count, int style_count, int size,
                                uint64_t seed);

// Loads every PNG in dir, resized to size x size.
std::vector<torch::Tensor> load_image_dir(const std::filesystem::path& dir, int size);

}  // namespace diffnst
