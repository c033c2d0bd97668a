#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "clsa/errors.hpp"
#include "clsa/pyramid_net.hpp"

namespace clsa {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw IoError("checkpoint " + path + ": truncated file");
  }
  return value;
}

template <typename T>
void put_tensor(std::ostream& out, const std::string& name, const std::vector<int>& shape,
                const std::vector<T>& data) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(out, std::is_same_v<T, float> ? 0 : 1);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
  for (int d : shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
}

struct RawTensor {
  std::uint8_t dtype = 0;
  std::vector<int> shape;
  std::vector<char> bytes;
};

template <typename T>
void take(std::map<std::string, RawTensor>& tensors, const std::string& name, std::vector<T>& dst,
          const std::string& path) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint " + path + ": missing tensor " + name);
  const std::uint8_t want = std::is_same_v<T, float> ? 0 : 1;
  if (it->second.dtype != want || it->second.bytes.size() != dst.size() * sizeof(T)) {
    throw IoError("checkpoint " + path + ": tensor " + name + " has wrong type or shape");
  }
  std::memcpy(dst.data(), it->second.bytes.data(), it->second.bytes.size());
  tensors.erase(it);
}

}  // namespace

void save_checkpoint(const PyramidNet& net, const std::vector<std::int64_t>& identity_map,
                     const nlohmann::json& extra, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  nlohmann::json meta = {{"config", net.config()}, {"identity_map", identity_map}, {"extra", extra}};
  const std::string meta_text = meta.dump();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  const auto backbone = net.backbone_params();
  const auto heads = net.head_params();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(backbone.size() + heads.size() + 2 * net.heads().size()));
  for (const auto* p : backbone) put_tensor(out, p->name, p->shape, p->value);
  for (const auto* p : heads) put_tensor(out, p->name, p->shape, p->value);
  for (const auto& head : net.heads()) {
    const std::string prefix = "head.block" + std::to_string(head.block) + ".bn.";
    const std::vector<int> shape{static_cast<int>(head.running_mean.size())};
    put_tensor(out, prefix + "running_mean", shape, head.running_mean);
    put_tensor(out, prefix + "running_var", shape, head.running_var);
  }
  if (!out) throw IoError("short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + where);
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint " + where + ": bad magic header");
  }
  const auto version = get<std::uint32_t>(in, where);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + where + ": unsupported version " + std::to_string(version));
  }
  const auto meta_len = get<std::uint32_t>(in, where);
  std::string meta_text(meta_len, '\0');
  if (!in.read(meta_text.data(), meta_len)) throw IoError("checkpoint " + where + ": truncated metadata");
  nlohmann::json meta;
  NetConfig config;
  try {
    meta = nlohmann::json::parse(meta_text);
    config = meta.at("config").get<NetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + where + ": bad metadata: " + e.what());
  }

  std::map<std::string, RawTensor> tensors;
  const auto count = get<std::uint32_t>(in, where);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = get<std::uint16_t>(in, where);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw IoError("checkpoint " + where + ": truncated tensor name");
    RawTensor raw;
    raw.dtype = get<std::uint8_t>(in, where);
    const auto rank = get<std::uint8_t>(in, where);
    std::size_t elements = 1;
    for (int r = 0; r < rank; ++r) {
      raw.shape.push_back(static_cast<int>(get<std::uint32_t>(in, where)));
      elements *= static_cast<std::size_t>(raw.shape.back());
    }
    if (raw.dtype > 1) throw IoError("checkpoint " + where + ": unknown dtype in " + name);
    raw.bytes.resize(elements * (raw.dtype == 0 ? sizeof(float) : sizeof(double)));
    if (!in.read(raw.bytes.data(), static_cast<std::streamsize>(raw.bytes.size()))) {
      throw IoError("checkpoint " + where + ": truncated tensor " + name);
    }
    tensors.emplace(std::move(name), std::move(raw));
  }

  Checkpoint ckpt{PyramidNet(config, 0), meta.value("identity_map", std::vector<std::int64_t>{}),
                  meta.value("extra", nlohmann::json::object())};
  for (auto* p : ckpt.net.backbone_params()) take(tensors, p->name, p->value, where);
  for (auto* p : ckpt.net.head_params()) take(tensors, p->name, p->value, where);
  for (auto& head : ckpt.net.heads()) {
    const std::string prefix = "head.block" + std::to_string(head.block) + ".bn.";
    take(tensors, prefix + "running_mean", head.running_mean, where);
    take(tensors, prefix + "running_var", head.running_var, where);
  }
  if (!tensors.empty()) {
    throw IoError("checkpoint " + where + ": unexpected tensor " + tensors.begin()->first);
  }
  return ckpt;
}

}  // namespace clsa
