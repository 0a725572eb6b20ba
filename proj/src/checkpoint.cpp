#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "vitdiv/vit.hpp"

namespace vitdiv {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'V', 'I', 'T', 'D', 'I', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw CheckpointError("checkpoint truncated while reading " + what);
  }
  return value;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  json header;
  header["version"] = kVersion;
  header["config"] = checkpoint.config;
  header["metadata"] = checkpoint.metadata;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : checkpoint.tensors) {
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"count", t.tensor.numel()}});
    offset += t.tensor.numel() * sizeof(double);
  }
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : checkpoint.tensors) {
    auto d = t.tensor.data();
    os.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  }
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(is, "header length");
  const auto file_size = std::filesystem::file_size(path);
  constexpr std::uint64_t kPreamble = sizeof(kMagic) + 4 + 8;
  if (header_len > file_size - kPreamble) {
    throw CheckpointError("checkpoint header length " + std::to_string(header_len) +
                          " exceeds file size");
  }
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::uint64_t payload_size = file_size - kPreamble - header_len;

  Checkpoint ck;
  try {
    ck.config = header.at("config").get<ViTConfig>();
    ck.config.validate();
    ck.metadata = header.value("metadata", json::object());
    std::vector<double> payload(payload_size / sizeof(double));
    if (payload_size % sizeof(double) != 0) {
      throw CheckpointError("checkpoint payload is not a whole number of float64 values");
    }
    is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_size));
    if (!is) throw CheckpointError("checkpoint payload truncated");
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("count").get<std::uint64_t>();
      if (shape_numel(shape) != count) {
        throw CheckpointError("tensor '" + name + "': count " + std::to_string(count) +
                              " disagrees with shape " + shape_str(shape));
      }
      if (offset % sizeof(double) != 0 || offset + count * sizeof(double) > payload_size) {
        throw CheckpointError("tensor '" + name + "': offset " + std::to_string(offset) +
                              " lies outside the payload");
      }
      auto first = payload.begin() + static_cast<std::ptrdiff_t>(offset / sizeof(double));
      ck.tensors.push_back({name, Tensor::from(shape, std::vector<double>(first, first + count))});
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint header holds an invalid model config: ") +
                          e.what());
  }
  return ck;
}

void save_model(const std::filesystem::path& path, const ViTModel& model, const json& metadata) {
  Checkpoint ck;
  ck.config = model.config();
  ck.metadata = metadata;
  for (const auto& p : model.parameters()) ck.tensors.push_back({p.name, p.tensor.detach()});
  write_checkpoint(path, ck);
}

ViTModel load_model(const std::filesystem::path& path, json* metadata) {
  Checkpoint ck = read_checkpoint(path);
  ViTModel model(ck.config, 0);
  std::map<std::string, Tensor> values;
  for (auto& t : ck.tensors) values.emplace(t.name, t.tensor);
  model.load_parameters(values);
  if (metadata) *metadata = ck.metadata;
  return model;
}

}  // namespace vitdiv
