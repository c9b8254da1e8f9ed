#include "pat/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "pat/errors.hpp"

namespace pat {

std::string sha256_hex(std::span<const uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

Dataset Dataset::select(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  Dataset out = *this;
  out.images = images.index_select(0, idx);
  out.labels = labels.index_select(0, idx);
  return out;
}

int64_t cifar_record_size(CifarVariant variant) {
  return kCifarPixels + (variant == CifarVariant::kCifar10 ? 1 : 2);
}

CifarRecords decode_cifar(std::span<const uint8_t> bytes, CifarVariant variant, long long base_offset) {
  const auto rec = cifar_record_size(variant);
  const auto size = static_cast<int64_t>(bytes.size());
  if (size == 0) throw DataError("empty CIFAR file", base_offset);
  if (size % rec != 0) {
    // Offset of the first byte of the incomplete record.
    throw DataError("CIFAR file length " + std::to_string(size) + " is not a multiple of the " +
                        std::to_string(rec) + "-byte record size",
                    base_offset + (size / rec) * rec);
  }
  const auto n = size / rec;
  const int64_t label_limit = variant == CifarVariant::kCifar10 ? 10 : 100;
  CifarRecords out;
  out.pixels = torch::empty({n, 3, kCifarSide, kCifarSide}, torch::kUInt8);
  out.labels = torch::empty({n}, torch::kInt64);
  if (variant == CifarVariant::kCifar100) out.coarse = torch::empty({n}, torch::kInt64);
  auto* px = out.pixels.data_ptr<uint8_t>();
  auto* lab = out.labels.data_ptr<int64_t>();
  for (int64_t i = 0; i < n; ++i) {
    const auto* r = bytes.data() + i * rec;
    const long long off = base_offset + i * rec;
    if (variant == CifarVariant::kCifar10) {
      if (r[0] >= label_limit) throw DataError("label " + std::to_string(r[0]) + " out of range", off);
      lab[i] = r[0];
    } else {
      if (r[0] >= 20) throw DataError("coarse label " + std::to_string(r[0]) + " out of range", off);
      if (r[1] >= label_limit) throw DataError("fine label " + std::to_string(r[1]) + " out of range", off + 1);
      out.coarse.data_ptr<int64_t>()[i] = r[0];
      lab[i] = r[1];
    }
    std::copy_n(r + (rec - kCifarPixels), kCifarPixels, px + i * kCifarPixels);
  }
  return out;
}

std::vector<uint8_t> encode_cifar(const CifarRecords& records, CifarVariant variant) {
  const auto rec = cifar_record_size(variant);
  const auto n = records.labels.size(0);
  auto pixels = records.pixels.contiguous();
  std::vector<uint8_t> out(static_cast<size_t>(n * rec));
  for (int64_t i = 0; i < n; ++i) {
    auto* r = out.data() + i * rec;
    if (variant == CifarVariant::kCifar10) {
      r[0] = static_cast<uint8_t>(records.labels[i].item<int64_t>());
    } else {
      r[0] = static_cast<uint8_t>(records.coarse[i].item<int64_t>());
      r[1] = static_cast<uint8_t>(records.labels[i].item<int64_t>());
    }
    std::copy_n(pixels.data_ptr<uint8_t>() + i * kCifarPixels, kCifarPixels, r + (rec - kCifarPixels));
  }
  return out;
}

std::array<float, 3> cifar_mean(CifarVariant variant) {
  if (variant == CifarVariant::kCifar10) return {0.4914f, 0.4822f, 0.4465f};
  return {0.5071f, 0.4865f, 0.4409f};
}

std::array<float, 3> cifar_std(CifarVariant variant) {
  if (variant == CifarVariant::kCifar10) return {0.2470f, 0.2435f, 0.2616f};
  return {0.2673f, 0.2564f, 0.2762f};
}

namespace {

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

torch::Tensor normalize(const torch::Tensor& pixels, const std::array<float, 3>& mean, const std::array<float, 3>& std) {
  auto m = torch::tensor({mean[0], mean[1], mean[2]}).view({1, 3, 1, 1});
  auto s = torch::tensor({std[0], std[1], std[2]}).view({1, 3, 1, 1});
  return (pixels.to(torch::kFloat32) / 255.0f - m) / s;
}

}  // namespace

Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, const std::string& split) {
  if (split != "train" && split != "test") throw ConfigError("data.split", "must be train or test");
  std::vector<std::string> files;
  if (variant == CifarVariant::kCifar10) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else {
      files.push_back("test_batch.bin");
    }
  } else {
    files.push_back(split + ".bin");
  }
  std::vector<torch::Tensor> pixels, labels;
  std::vector<uint8_t> all;
  for (const auto& f : files) {
    auto bytes = read_file(dir / f);
    try {
      auto recs = decode_cifar(bytes, variant);
      pixels.push_back(recs.pixels);
      labels.push_back(recs.labels);
    } catch (const DataError& e) {
      throw DataError((dir / f).string() + ": " + e.what());
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  Dataset ds;
  ds.provenance.mean = cifar_mean(variant);
  ds.provenance.std = cifar_std(variant);
  ds.images = normalize(torch::cat(pixels), ds.provenance.mean, ds.provenance.std);
  ds.labels = torch::cat(labels);
  ds.num_classes = variant == CifarVariant::kCifar10 ? 10 : 100;
  ds.split = split;
  ds.provenance.source = std::string(variant == CifarVariant::kCifar10 ? "cifar10:" : "cifar100:") + dir.string();
  ds.provenance.digest = sha256_hex(all);
  return ds;
}

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("data.num_classes", "must be >= 2");
  if (spec.n < spec.num_classes) throw ConfigError("data.n", "must be >= num_classes");
  if (spec.image_size < 4) throw ConfigError("data.image_size", "must be >= 4");
  if (!(spec.noise >= 0.0)) throw ConfigError("data.noise", "must be >= 0");

  const auto side = spec.image_size;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> gauss(0.f, 1.f);
  std::uniform_real_distribution<float> unit(0.f, 1.f);

  // Three coloured blobs per class prototype.
  auto prototypes = torch::zeros({spec.num_classes, 3, side, side});
  auto proto = prototypes.accessor<float, 4>();
  for (int64_t c = 0; c < spec.num_classes; ++c) {
    for (int blob = 0; blob < 3; ++blob) {
      const float cy = unit(rng) * side, cx = unit(rng) * side;
      const float radius = side * (0.12f + 0.15f * unit(rng));
      float colour[3];
      for (auto& v : colour) v = unit(rng) < 0.5f ? -1.f : 1.f;
      for (int64_t y = 0; y < side; ++y) {
        for (int64_t x = 0; x < side; ++x) {
          const float r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          const float w = std::exp(-r2 / (2 * radius * radius));
          for (int ch = 0; ch < 3; ++ch) proto[c][ch][y][x] += colour[ch] * w;
        }
      }
    }
  }

  std::vector<int64_t> labels(spec.n);
  for (int64_t i = 0; i < spec.n; ++i) labels[i] = i % spec.num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  auto images = torch::empty({spec.n, 3, side, side});
  auto img = images.accessor<float, 4>();
  for (int64_t i = 0; i < spec.n; ++i) {
    const auto c = labels[i];
    for (int ch = 0; ch < 3; ++ch) {
      for (int64_t y = 0; y < side; ++y) {
        for (int64_t x = 0; x < side; ++x) img[i][ch][y][x] = proto[c][ch][y][x] + static_cast<float>(spec.noise) * gauss(rng);
      }
    }
  }

  Dataset ds;
  ds.images = images;
  ds.labels = torch::tensor(labels, torch::kInt64);
  ds.num_classes = spec.num_classes;
  ds.split = "synthetic";
  std::ostringstream desc;
  desc << "synthetic seed=" << spec.seed << " classes=" << spec.num_classes << " n=" << spec.n << " size=" << side
       << " noise=" << spec.noise;
  ds.provenance.source = desc.str();
  ds.provenance.digest = sha256_hex(desc.str());
  ds.provenance.seed = spec.seed;
  return ds;
}

std::vector<int64_t> stratified_indices(const torch::Tensor& labels, int64_t num_classes, double fraction,
                                        uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data.fraction", "must be in (0, 1]");
  const auto n = labels.size(0);
  auto lab = labels.to(torch::kInt64).contiguous();
  const auto* l = lab.data_ptr<int64_t>();
  std::vector<std::vector<int64_t>> per_class(num_classes);
  for (int64_t i = 0; i < n; ++i) per_class.at(l[i]).push_back(i);
  if (fraction == 1.0) {
    std::vector<int64_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::mt19937_64 rng(seed);
  std::vector<int64_t> out;
  for (auto& members : per_class) {
    if (members.empty()) continue;
    auto keep = std::max<int64_t>(1, std::llround(fraction * static_cast<double>(members.size())));
    std::shuffle(members.begin(), members.end(), rng);
    out.insert(out.end(), members.begin(), members.begin() + keep);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Dataset subset_fraction(const Dataset& dataset, double fraction, uint64_t seed) {
  auto idx = stratified_indices(dataset.labels, dataset.num_classes, fraction, seed);
  auto out = dataset.select(idx);
  if (fraction != 1.0) {
    std::ostringstream os;
    os << dataset.provenance.source << " fraction=" << fraction << " seed=" << seed;
    out.provenance.source = os.str();
  }
  return out;
}

torch::Tensor augment_batch(const torch::Tensor& images, std::mt19937_64& rng, bool enabled, int64_t pad) {
  if (!enabled) return images;
  const auto h = images.size(2), w = images.size(3);
  auto padded = torch::constant_pad_nd(images, {pad, pad, pad, pad}, 0);
  std::uniform_int_distribution<int64_t> shift(0, 2 * pad);
  std::bernoulli_distribution flip(0.5);
  std::vector<torch::Tensor> out;
  out.reserve(images.size(0));
  for (int64_t i = 0; i < images.size(0); ++i) {
    const auto dy = shift(rng), dx = shift(rng);
    auto crop = padded[i].slice(1, dy, dy + h).slice(2, dx, dx + w);
    if (flip(rng)) crop = crop.flip({2});
    out.push_back(crop);
  }
  return torch::stack(out);
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size, uint64_t seed, int64_t epoch,
                                                bool drop_last) {
  if (batch_size <= 0) throw ConfigError("train.batch_size", "must be positive");
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 1000003ull + static_cast<uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t begin = 0; begin < n; begin += batch_size) {
    const auto end = std::min(n, begin + batch_size);
    if (drop_last && end - begin < batch_size) break;
    batches.emplace_back(order.begin() + begin, order.begin() + end);
  }
  return batches;
}

}  // namespace pat
