#pragma once

// Deterministic class-structured image generators in the exact CIFAR binary
// layouts, for exercising the ingestion/training stack without shipping a
// dataset.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "revode/data.hpp"
#include "revode/rng.hpp"

namespace synth {

// Class k is a distinct oriented sinusoid plus pixel noise; easily separable
// by a small convolutional network yet non-trivial to memorize.
inline std::uint8_t pixel_value(int cls, int classes, int c, int y, int x, double noise) {
  const double angle = 3.14159265358979 * cls / std::max(1, classes);
  const double freq = 2.0 + (cls % 3);
  const double fx = freq * std::cos(angle), fy = freq * std::sin(angle);
  const double phase = 2.0943951023931953 * c;  // 2*pi/3 per channel
  const double v = 127.5 + 95.0 * std::sin(2.0 * 3.14159265358979 * (fx * x + fy * y) / 32.0 +
                                           phase) +
                   noise;
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

inline void fill_image(std::uint8_t* out, int cls, int classes, revode::Rng& rng) {
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        out[(c * 32 + y) * 32 + x] =
            pixel_value(cls, classes, c, y, x, rng.uniform(-20.0, 20.0));
}

// Writes `count` CIFAR-10 records (label byte + 3072 pixel bytes) with labels
// cycling through the classes.
inline void write_cifar10_file(const std::string& path, int count, std::uint64_t seed,
                               int classes = 10) {
  std::ofstream os(path, std::ios::binary);
  std::vector<std::uint8_t> rec(3073);
  for (int i = 0; i < count; ++i) {
    const int cls = i % classes;
    rec[0] = static_cast<std::uint8_t>(cls);
    revode::Rng rng = revode::Rng::stream(seed, static_cast<std::uint64_t>(i));
    fill_image(rec.data() + 1, cls, classes, rng);
    os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

// Full CIFAR-10 directory layout: five training batches plus a test batch.
inline void write_cifar10_dir(const std::string& dir, int per_batch, int test_count,
                              std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (int b = 1; b <= 5; ++b)
    write_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string(),
                       per_batch, seed + static_cast<std::uint64_t>(b));
  write_cifar10_file((fs::path(dir) / "test_batch.bin").string(), test_count, seed + 99);
}

inline void write_cifar100_file(const std::string& path, int count, std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary);
  std::vector<std::uint8_t> rec(3074);
  for (int i = 0; i < count; ++i) {
    const int fine = i % 100;
    rec[0] = static_cast<std::uint8_t>(fine / 5);  // coarse label
    rec[1] = static_cast<std::uint8_t>(fine);
    revode::Rng rng = revode::Rng::stream(seed, static_cast<std::uint64_t>(i));
    fill_image(rec.data() + 2, fine % 10, 10, rng);
    os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

// Small in-memory dataset (arbitrary geometry) for training-loop tests.
inline revode::Dataset make_dataset(revode::index_t count, int classes, revode::index_t channels,
                                    revode::index_t hw, std::uint64_t seed) {
  revode::Dataset ds;
  ds.count = count;
  ds.channels = channels;
  ds.height = hw;
  ds.width = hw;
  ds.classes = classes;
  ds.split = "synthetic";
  ds.pixels.resize(static_cast<std::size_t>(count * channels * hw * hw));
  ds.labels.resize(static_cast<std::size_t>(count));
  for (revode::index_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % classes);
    ds.labels[static_cast<std::size_t>(i)] = cls;
    revode::Rng rng = revode::Rng::stream(seed, static_cast<std::uint64_t>(i));
    std::uint8_t* img =
        ds.pixels.data() + static_cast<std::size_t>(i) * channels * hw * hw;
    for (revode::index_t c = 0; c < channels; ++c)
      for (revode::index_t y = 0; y < hw; ++y)
        for (revode::index_t x = 0; x < hw; ++x)
          img[(c * hw + y) * hw + x] = pixel_value(cls, classes, static_cast<int>(c),
                                                   static_cast<int>(y), static_cast<int>(x),
                                                   rng.uniform(-20.0, 20.0));
  }
  ds.compute_channel_stats();
  return ds;
}

}  // namespace synth
