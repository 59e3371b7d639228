#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

namespace diffnst {

// Images are float32 [3, H, W] tensors in [0, 1]; PNG on disk is 8-bit RGB.
torch::Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

// Bicubic resize to size x size, clamped back into [0, 1].
torch::Tensor resize_image(const torch::Tensor& image, int size);

// Throws ConfigError unless image is [3,H,W], finite, within [0,1].
void check_image(const torch::Tensor& image);

// Sorted PNG files of a directory.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

// Horizontal strip of equally sized images.
torch::Tensor hconcat(const std::vector<torch::Tensor>& images);

}  // namespace diffnst
