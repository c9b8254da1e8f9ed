#include <doctest.h>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "pat/data.hpp"
#include "pat/errors.hpp"

using namespace pat;
namespace fs = std::filesystem;

namespace {

// Two records with a recognizable byte pattern: pixel k of record r is (7r + k) mod 251.
std::vector<uint8_t> two_records(CifarVariant v) {
  std::vector<uint8_t> bytes;
  for (int r = 0; r < 2; ++r) {
    if (v == CifarVariant::kCifar100) bytes.push_back(static_cast<uint8_t>(3 + r));  // coarse
    bytes.push_back(static_cast<uint8_t>(v == CifarVariant::kCifar10 ? 6 + r : 42 + r));
    for (int k = 0; k < kCifarPixels; ++k) bytes.push_back(static_cast<uint8_t>((7 * r + k) % 251));
  }
  return bytes;
}

std::vector<int64_t> class_counts(const torch::Tensor& labels, int64_t k) {
  std::vector<int64_t> counts(k, 0);
  for (int64_t i = 0; i < labels.size(0); ++i) ++counts[labels[i].item<int64_t>()];
  return counts;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("hand-crafted records decode exactly") {
    for (auto v : {CifarVariant::kCifar10, CifarVariant::kCifar100}) {
      auto bytes = two_records(v);
      REQUIRE(static_cast<int64_t>(bytes.size()) == 2 * cifar_record_size(v));
      auto recs = decode_cifar(bytes, v);
      CHECK(recs.pixels.sizes().vec() == std::vector<int64_t>{2, 3, 32, 32});
      const int64_t base = v == CifarVariant::kCifar10 ? 6 : 42;
      CHECK(recs.labels[0].item<int64_t>() == base);
      CHECK(recs.labels[1].item<int64_t>() == base + 1);
      if (v == CifarVariant::kCifar100) CHECK(recs.coarse[1].item<int64_t>() == 4);
      // channel-major R, G, B, each 32x32 row-major
      for (int r = 0; r < 2; ++r) {
        for (int k : {0, 1, 31, 32, 1023, 1024, 2047, 2048, 3071}) {
          const int ch = k / 1024, y = (k % 1024) / 32, x = k % 32;
          CHECK(recs.pixels[r][ch][y][x].item<uint8_t>() == (7 * r + k) % 251);
        }
      }
      CHECK(encode_cifar(recs, v) == bytes);
    }
  }

  TEST_CASE("round trip of random records is byte-identical") {
    std::mt19937 rng(5);
    std::uniform_int_distribution<int> byte(0, 255), label(0, 9);
    std::vector<uint8_t> bytes;
    for (int r = 0; r < 17; ++r) {
      bytes.push_back(static_cast<uint8_t>(label(rng)));
      for (int k = 0; k < kCifarPixels; ++k) bytes.push_back(static_cast<uint8_t>(byte(rng)));
    }
    CHECK(encode_cifar(decode_cifar(bytes, CifarVariant::kCifar10), CifarVariant::kCifar10) == bytes);
  }

  TEST_CASE("truncated file reports the offset of the incomplete record") {
    for (int k : {1, 2, 5}) {
      std::vector<uint8_t> bytes(static_cast<size_t>(3073 * k - 1), 0);
      try {
        decode_cifar(bytes, CifarVariant::kCifar10);
        FAIL("expected DataError");
      } catch (const DataError& e) {
        CHECK(e.offset() == 3073LL * (k - 1));
      }
    }
    try {
      decode_cifar(std::vector<uint8_t>(3073 + 10, 0), CifarVariant::kCifar10, 1000);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(e.offset() == 1000 + 3073);
    }
  }

  TEST_CASE("out-of-range label reports its byte offset") {
    auto bytes = two_records(CifarVariant::kCifar10);
    bytes[3073] = 10;
    try {
      decode_cifar(bytes, CifarVariant::kCifar10);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(e.offset() == 3073);
    }
    auto b100 = two_records(CifarVariant::kCifar100);
    b100[3074 + 1] = 100;
    try {
      decode_cifar(b100, CifarVariant::kCifar100);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(e.offset() == 3074 + 1);
    }
  }

  TEST_CASE("load_cifar reads the binary layout and records provenance") {
    auto dir = fs::temp_directory_path() / "pat_test_cifar";
    fs::create_directories(dir);
    auto bytes = two_records(CifarVariant::kCifar10);
    {
      std::ofstream out(dir / "test_batch.bin", std::ios::binary);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    auto ds = load_cifar(dir, CifarVariant::kCifar10, "test");
    CHECK(ds.size() == 2);
    CHECK(ds.num_classes == 10);
    CHECK(ds.provenance.digest == sha256_hex(bytes));
    const float expected = (static_cast<float>(7 % 251) / 255.0f - 0.4914f) / 0.2470f;
    CHECK(ds.images[1][0][0][0].item<float>() == doctest::Approx(expected).epsilon(1e-6));
    CHECK_THROWS_AS(load_cifar(dir, CifarVariant::kCifar10, "train"), DataError);
    {
      std::ofstream out(dir / "test_batch.bin", std::ios::binary);
      out.write(reinterpret_cast<const char*>(bytes.data()), 3073 + 5);
    }
    CHECK_THROWS_AS(load_cifar(dir, CifarVariant::kCifar10, "test"), DataError);
    fs::remove_all(dir);
  }

  TEST_CASE("sha256 known answer") {
    CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }

  TEST_CASE("synthetic data: deterministic, balanced, validated") {
    auto a = synth_dataset({3, 10, 1000, 16, 0.5});
    auto b = synth_dataset({3, 10, 1000, 16, 0.5});
    auto c = synth_dataset({4, 10, 1000, 16, 0.5});
    CHECK(torch::equal(a.images, b.images));
    CHECK(torch::equal(a.labels, b.labels));
    CHECK_FALSE(torch::equal(a.images, c.images));
    for (auto n : class_counts(a.labels, 10)) CHECK(n == 100);
    auto odd = synth_dataset({1, 10, 1003, 8, 0.5});
    for (auto n : class_counts(odd.labels, 10)) CHECK((n == 100 || n == 101));
    CHECK_THROWS_AS(synth_dataset({0, 10, 5, 16, 0.5}), ConfigError);
    CHECK_THROWS_AS(synth_dataset({0, 1, 50, 16, 0.5}), ConfigError);
    CHECK_THROWS_AS(synth_dataset({0, 10, 50, 16, -1.0}), ConfigError);
  }

  TEST_CASE("a linear probe separates the high-SNR setting") {
    auto ds = synth_dataset({11, 10, 1000, 16, 0.5});
    auto x = ds.images.flatten(1);
    auto train_x = x.slice(0, 0, 800), test_x = x.slice(0, 800);
    auto train_y = ds.labels.slice(0, 0, 800), test_y = ds.labels.slice(0, 800);
    torch::manual_seed(0);
    torch::nn::Linear probe(x.size(1), 10);
    torch::optim::Adam opt(probe->parameters(), torch::optim::AdamOptions(1e-2));
    for (int it = 0; it < 200; ++it) {
      opt.zero_grad();
      torch::nn::functional::cross_entropy(probe(train_x), train_y).backward();
      opt.step();
    }
    torch::NoGradGuard g;
    const double acc = probe(test_x).argmax(1).eq(test_y).to(torch::kFloat64).mean().item<double>();
    CHECK(acc > 0.95);
  }

  TEST_CASE("stratified fraction") {
    auto ds = synth_dataset({2, 10, 1000, 8, 0.5});
    auto full = stratified_indices(ds.labels, 10, 1.0, 0);
    CHECK(full.size() == 1000);
    for (int64_t i = 0; i < 1000; ++i) CHECK(full[i] == i);
    CHECK(torch::equal(subset_fraction(ds, 1.0, 3).labels, ds.labels));

    auto q1 = subset_fraction(ds, 0.25, 1), q2 = subset_fraction(ds, 0.25, 2);
    CHECK(q1.size() == 250);
    for (auto n : class_counts(q1.labels, 10)) CHECK(n == 25);
    CHECK(class_counts(q1.labels, 10) == class_counts(q2.labels, 10));
    CHECK(stratified_indices(ds.labels, 10, 0.25, 1) != stratified_indices(ds.labels, 10, 0.25, 2));
    CHECK(stratified_indices(ds.labels, 10, 0.25, 1) == stratified_indices(ds.labels, 10, 0.25, 1));
    CHECK(subset_fraction(ds, 0.0001, 0).size() == 10);
    CHECK_THROWS_AS(subset_fraction(ds, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(subset_fraction(ds, 1.5, 0), ConfigError);
  }

  TEST_CASE("augmentation keeps shape, is identity when disabled, and moves pixels") {
    auto images = torch::randn({6, 3, 16, 16});
    std::mt19937_64 rng(1);
    CHECK(augment_batch(images, rng, false).is_same(images));
    auto aug = augment_batch(images, rng, true);
    CHECK(aug.sizes() == images.sizes());
    CHECK_FALSE(torch::equal(aug, images));
    // zero padding: every augmented image is a shifted, possibly flipped, window
    auto zero_pad = augment_batch(torch::ones({1, 3, 8, 8}), rng, true, 0);
    CHECK(torch::equal(zero_pad, torch::ones({1, 3, 8, 8})));
  }

  TEST_CASE("epoch batches cover every index once and depend on epoch") {
    auto b1 = epoch_batches(103, 10, 7, 1);
    CHECK(b1.size() == 11);
    std::set<int64_t> seen;
    for (const auto& b : b1) seen.insert(b.begin(), b.end());
    CHECK(seen.size() == 103);
    CHECK(epoch_batches(103, 10, 7, 1) == b1);
    CHECK(epoch_batches(103, 10, 7, 2) != b1);
    CHECK(epoch_batches(103, 10, 7, 1, true).size() == 10);
    CHECK_THROWS_AS(epoch_batches(10, 0, 0, 1), ConfigError);
  }
}
