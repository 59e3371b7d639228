#include "diffnst/tensor_io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "diffnst/error.hpp"

namespace diffnst {

static_assert(std::endian::native == std::endian::little, "tensor files are written in host byte order");

namespace fs = std::filesystem;

namespace {

std::string file_name_for(std::size_t index, const std::string& name) {
  std::string safe;
  safe.reserve(name.size());
  for (char c : name) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-';
    safe.push_back(keep ? c : '_');
  }
  char prefix[16];
  std::snprintf(prefix, sizeof(prefix), "%04zu_", index);
  return prefix + safe + ".f32";
}

}  // namespace

const torch::Tensor& TensorDir::at(std::string_view name) const {
  for (const auto& [key, value] : tensors) {
    if (key == name) return value;
  }
  throw IoError("tensor '" + std::string(name) + "' not found in " + kind + " directory");
}

bool TensorDir::contains(std::string_view name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

void save_tensor_dir(const fs::path& dir, std::string_view kind, const nlohmann::json& meta,
                     const NamedTensors& tensors) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, tensor] = tensors[i];
    if (tensor.scalar_type() != torch::kFloat32) {
      throw IoError("tensor '" + name + "' is not float32");
    }
    const auto contiguous = tensor.detach().to(torch::kCPU).contiguous();
    const std::string file = file_name_for(i, name);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(contiguous.data_ptr<float>()),
              static_cast<std::streamsize>(contiguous.numel() * sizeof(float)));
    if (!out) throw IoError("short write on " + (dir / file).string());
    index.push_back({{"name", name}, {"file", file}, {"shape", contiguous.sizes().vec()}});
  }

  nlohmann::json manifest = {
      {"format", "diffnst-tensors"},
      {"format_version", kTensorDirFormatVersion},
      {"kind", kind},
      {"meta", meta},
      {"tensors", index},
  };
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

TensorDir load_tensor_dir(const fs::path& dir, std::string_view expected_kind) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "diffnst-tensors") {
    throw IoError(dir.string() + " is not a diffnst tensor directory");
  }
  if (manifest.value("format_version", -1) != kTensorDirFormatVersion) {
    throw IoError("unsupported format_version in " + dir.string());
  }
  TensorDir result;
  result.kind = manifest.value("kind", "");
  if (!expected_kind.empty() && result.kind != expected_kind) {
    throw IoError("expected a '" + std::string(expected_kind) + "' directory, found '" + result.kind + "'");
  }
  result.meta = manifest.value("meta", nlohmann::json::object());

  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto file = entry.at("file").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto tensor = torch::empty(shape, torch::kFloat32);
    const auto bytes = static_cast<std::uintmax_t>(tensor.numel()) * sizeof(float);
    std::error_code ec;
    const auto on_disk = fs::file_size(dir / file, ec);
    if (ec || on_disk != bytes) {
      throw IoError("size mismatch for tensor file " + (dir / file).string());
    }
    std::ifstream data(dir / file, std::ios::binary);
    data.read(reinterpret_cast<char*>(tensor.data_ptr<float>()), static_cast<std::streamsize>(bytes));
    if (!data) throw IoError("short read on " + (dir / file).string());
    result.tensors.emplace_back(name, std::move(tensor));
  }
  return result;
}

void Fnv1a::update(const void* data, std::size_t size) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state_ ^= bytes[i];
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(const torch::Tensor& tensor) {
  const auto contiguous = tensor.detach().to(torch::kCPU).contiguous();
  const auto shape = contiguous.sizes().vec();
  update(shape.data(), shape.size() * sizeof(int64_t));
  update(contiguous.data_ptr(), static_cast<std::size_t>(contiguous.numel()) * contiguous.element_size());
}

std::string Fnv1a::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t value) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << value;
  return out.str();
}

}  // namespace diffnst
