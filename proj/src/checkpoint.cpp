#include "pat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pat/errors.hpp"

namespace pat {

namespace {

constexpr char kMagic[8] = {'P', 'A', 'T', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kInt32: return "int32";
    case torch::kUInt8: return "uint8";
    case torch::kBool: return "bool";
    default: throw ContractError(std::string("unsupported checkpoint dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  if (s == "int32") return torch::kInt32;
  if (s == "uint8") return torch::kUInt8;
  if (s == "bool") return torch::kBool;
  throw DataError("unknown dtype '" + s + "' in checkpoint header");
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [key, value] : tensors) {
    if (key == name) return &value;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> payload;
  uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(t.scalar_type())},
                                 {"shape", t.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(std::move(t));
  }
  const auto text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    const uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : payload) {
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  uint64_t len = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("bad checkpoint magic", 0);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ull << 32)) throw DataError("bad checkpoint header length", 8);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("truncated checkpoint header", 16);
  const auto header = nlohmann::json::parse(text);
  const auto base = static_cast<long long>(16 + len);

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype"))));
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    const auto offset = base + entry.at("offset").get<long long>();
    if (nbytes != static_cast<uint64_t>(t.numel()) * t.element_size()) {
      throw DataError("size mismatch for tensor " + entry.at("name").get<std::string>(), offset);
    }
    in.seekg(offset);
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw DataError("truncated payload for tensor " + entry.at("name").get<std::string>(), offset);
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void capture_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters()) ckpt.tensors.emplace_back(prefix + "." + p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers()) ckpt.tensors.emplace_back(prefix + "." + b.key(), b.value().detach().clone());
}

void restore_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
    const auto* src = ckpt.find(prefix + "." + key);
    if (!src) throw BindingError("checkpoint has no entry '" + prefix + "." + key + "'");
    if (src->sizes() != dst.sizes()) {
      throw BindingError("checkpoint entry '" + prefix + "." + key + "' has a different shape");
    }
    dst.copy_(*src);
  };
  for (auto& p : module.named_parameters()) copy_into(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy_into(b.key(), b.value());
}

}  // namespace pat
