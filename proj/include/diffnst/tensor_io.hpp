#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace diffnst {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// On-disk layout shared by checkpoints and traces:
//   <dir>/manifest.json   {format, format_version, kind, meta, tensors: [{name, file, shape}]}
//   <dir>/<nnnn>_<name>.f32  raw little-endian float32, row-major
inline constexpr int kTensorDirFormatVersion = 1;

struct TensorDir {
  std::string kind;
  nlohmann::json meta;
  NamedTensors tensors;

  const torch::Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
};

void save_tensor_dir(const std::filesystem::path& dir, std::string_view kind, const nlohmann::json& meta,
                     const NamedTensors& tensors);
TensorDir load_tensor_dir(const std::filesystem::path& dir, std::string_view expected_kind);

// 64-bit FNV-1a, used for fingerprints and parameter checksums.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  void update(const torch::Tensor& tensor);
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t value);

}  // namespace diffnst
