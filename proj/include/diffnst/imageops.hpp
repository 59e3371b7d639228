#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace diffnst {

// Pixel mean and population covariance over all pixels, in float64.
struct ColorStats {
  torch::Tensor mean;        // [C]
  torch::Tensor covariance;  // [C, C]
};

ColorStats color_stats(const torch::Tensor& image);

inline constexpr double kColorRegularizer = 1e-5;

// Mean/covariance transfer: A (x - mu_c) + mu_s with
// A = Sigma_s^{1/2} Sigma_c^{-1/2}. Eigenvalues of Sigma_c below
// kColorRegularizer are lifted to it before inversion. Works for any channel
// count; `clamp` keeps the result inside [0, 1].
torch::Tensor match_colors(const torch::Tensor& content, const torch::Tensor& style, bool clamp = true);

// Gradient magnitude of the 3x3 Sobel operator on luma, replicate-padded.
// image: [3,H,W] -> [H,W]; [B,3,H,W] -> [B,H,W]. Differentiable.
torch::Tensor sobel_map(const torch::Tensor& image);

enum class CropBin { kSimple, kComplex };

struct CropWindow {
  int top = 0;
  int left = 0;
  double score = 0.0;  // mean Sobel magnitude inside the window
};

// Draws `candidates` seeded windows, ranks them by mean Sobel magnitude and
// returns n windows from the bottom (simple) or top (complex) quartile.
std::vector<CropWindow> select_crops(const torch::Tensor& sobel, int n, int size, CropBin bin, uint64_t seed,
                                     int candidates = 64);

std::vector<torch::Tensor> sample_crops(const torch::Tensor& image, const torch::Tensor& sobel, int n, int size,
                                        CropBin bin, uint64_t seed, int candidates = 64);

// Stack of [C+1, size, size] crops of image with its Sobel map appended as a channel.
torch::Tensor crops_with_sobel(const torch::Tensor& image, const torch::Tensor& sobel,
                               const std::vector<CropWindow>& windows, int size);

}  // namespace diffnst
