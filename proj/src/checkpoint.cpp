#include "diffnst/checkpoint.hpp"

#include "diffnst/error.hpp"

namespace diffnst {

namespace {

constexpr const char* kKind = "checkpoint";

}  // namespace

void Checkpoint::save(const std::filesystem::path& dir) const {
  if (!backbone) throw ConfigError("checkpoint has no backbone");
  std::filesystem::create_directories(dir);
  backbone->save(dir / "backbone");

  nlohmann::json meta{{"checkpoint_format_version", format_version},
                      {"backbone_fingerprint", backbone_fingerprint},
                      {"step", step},
                      {"train_config", train_config},
                      {"hijack_options", hijack_options},
                      {"encoder_name", encoder_name},
                      {"code_dim", code_dim},
                      {"encoder_trainable", encoder_trainable},
                      {"descriptor_dim", descriptor_dim},
                      {"optimizer_meta", optimizer_meta}};
  NamedTensors all;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [group, tensors] : std::vector<std::pair<std::string, const NamedTensors*>>{
           {"hijack", &hijack}, {"loss_modules", &loss_modules}, {"encoder", &encoder}, {"optimizer", &optimizer}}) {
    counts[group] = tensors->size();
    for (const auto& [name, t] : *tensors) all.emplace_back(group + "/" + name, t);
  }
  meta["group_sizes"] = counts;
  save_tensor_dir(dir, kKind, meta, all);
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
  auto stored = load_tensor_dir(dir, kKind);
  const auto& meta = stored.meta;
  Checkpoint c;
  c.format_version = meta.at("checkpoint_format_version").get<int>();
  if (c.format_version != kFormatVersion) {
    throw IoError("unsupported checkpoint format version " + std::to_string(c.format_version));
  }
  c.backbone_fingerprint = meta.at("backbone_fingerprint").get<std::string>();
  c.step = meta.at("step").get<int64_t>();
  c.train_config = meta.at("train_config");
  c.hijack_options = meta.at("hijack_options");
  c.encoder_name = meta.at("encoder_name").get<std::string>();
  c.code_dim = meta.at("code_dim").get<int>();
  c.encoder_trainable = meta.at("encoder_trainable").get<bool>();
  c.descriptor_dim = meta.at("descriptor_dim").get<int>();
  c.optimizer_meta = meta.at("optimizer_meta");

  for (auto& [name, t] : stored.tensors) {
    const auto slash = name.find('/');
    const auto group = name.substr(0, slash);
    const auto rest = name.substr(slash + 1);
    if (group == "hijack") c.hijack.emplace_back(rest, t);
    else if (group == "loss_modules") c.loss_modules.emplace_back(rest, t);
    else if (group == "encoder") c.encoder.emplace_back(rest, t);
    else if (group == "optimizer") c.optimizer.emplace_back(rest, t);
    else throw IoError("unknown checkpoint tensor group: " + group);
  }

  c.backbone = Backbone::load(dir / "backbone");
  if (c.backbone->fingerprint() != c.backbone_fingerprint) {
    throw TraceError("checkpoint backbone fingerprint mismatch");
  }
  return c;
}

}  // namespace diffnst
