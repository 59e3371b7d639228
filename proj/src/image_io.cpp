#include "diffnst/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstring>
#include <sstream>

#include "diffnst/error.hpp"

namespace diffnst {

torch::Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const auto h = static_cast<int64_t>(image.height), w = static_cast<int64_t>(image.width);
  auto bytes = torch::from_blob(buffer.data(), {h, w, 3}, torch::kUInt8);
  return bytes.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1)) {
    throw ConfigError("write_png expects a [3,H,W] or [1,H,W] tensor");
  }
  auto rgb = image.size(0) == 1 ? image.expand({3, image.size(1), image.size(2)}) : image;
  auto bytes = rgb.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image out;
  std::memset(&out, 0, sizeof(out));
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(bytes.size(1));
  out.height = static_cast<png_uint_32>(bytes.size(0));
  out.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&out, path.c_str(), 0, bytes.data_ptr<uint8_t>(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + out.message);
  }
}

torch::Tensor resize_image(const torch::Tensor& image, int size) {
  if (image.size(1) == size && image.size(2) == size) return image;
  namespace F = torch::nn::functional;
  auto out = F::interpolate(image.unsqueeze(0),
                            F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{size, size})
                                .mode(torch::kBicubic)
                                .align_corners(false));
  return out.squeeze(0).clamp(0.0, 1.0);
}

void check_image(const torch::Tensor& image) {
  if (!image.defined() || image.dim() != 3 || image.size(0) != 3) {
    throw ConfigError("image must be a [3,H,W] tensor");
  }
  if (!torch::isfinite(image).all().item<bool>()) throw ConfigError("image has non-finite values");
  if (image.min().item<double>() < 0.0 || image.max().item<double>() > 1.0) {
    throw ConfigError("image values must lie in [0,1]");
  }
}

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

torch::Tensor hconcat(const std::vector<torch::Tensor>& images) {
  if (images.empty()) throw ConfigError("hconcat needs at least one image");
  std::vector<torch::Tensor> parts(images.begin(), images.end());
  return torch::cat(parts, 2);
}

}  // namespace diffnst
