#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "diffnst/backbone.hpp"
#include "diffnst/tensor_io.hpp"
#include "json.hpp"

namespace diffnst {

// Everything needed to resume training or run inference.
//   <dir>/manifest.json + tensors   trainable state and optimizer moments
//   <dir>/backbone/                 the frozen backbone it was trained against
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  int format_version = kFormatVersion;
  std::string backbone_fingerprint;
  int64_t step = 0;
  nlohmann::json train_config = nlohmann::json::object();
  nlohmann::json hijack_options = nlohmann::json::object();
  std::string encoder_name;
  int code_dim = 256;
  bool encoder_trainable = false;
  int descriptor_dim = 0;
  // Per-optimizer Adam step counts, keyed like the optimizer tensors.
  nlohmann::json optimizer_meta = nlohmann::json::object();

  NamedTensors hijack;
  NamedTensors loss_modules;
  NamedTensors encoder;
  NamedTensors optimizer;

  std::shared_ptr<const Backbone> backbone;

  void save(const std::filesystem::path& dir) const;
  // Throws TraceError when the stored backbone does not match the recorded fingerprint.
  static Checkpoint load(const std::filesystem::path& dir);
};

}  // namespace diffnst
