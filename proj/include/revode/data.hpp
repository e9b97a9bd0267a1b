#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "revode/rng.hpp"
#include "revode/tensor.hpp"

namespace revode {

enum class CifarVariant { cifar10, cifar100 };

inline std::string to_string(CifarVariant v) {
  return v == CifarVariant::cifar10 ? "cifar10" : "cifar100";
}

// Images are kept as ingested uint8 (CHW per record) and standardized to
// float at batch assembly.
struct Dataset {
  index_t count = 0;
  index_t channels = 3, height = 32, width = 32;
  int classes = 10;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::string split;
  std::vector<double> ch_mean, ch_std;  // per-channel stats in [0,1] scale

  const std::uint8_t* image(index_t i) const {
    return pixels.data() + static_cast<std::size_t>(i) * channels * height * width;
  }

  void compute_channel_stats() {
    ch_mean.assign(static_cast<std::size_t>(channels), 0.0);
    ch_std.assign(static_cast<std::size_t>(channels), 0.0);
    if (count == 0) return;
    const index_t plane = height * width;
    std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> sq(static_cast<std::size_t>(channels), 0.0);
    for (index_t i = 0; i < count; ++i) {
      const std::uint8_t* img = image(i);
      for (index_t c = 0; c < channels; ++c)
        for (index_t p = 0; p < plane; ++p) {
          const double v = img[c * plane + p] / 255.0;
          sum[static_cast<std::size_t>(c)] += v;
          sq[static_cast<std::size_t>(c)] += v * v;
        }
    }
    const double n = static_cast<double>(count * plane);
    for (index_t c = 0; c < channels; ++c) {
      const double m = sum[static_cast<std::size_t>(c)] / n;
      ch_mean[static_cast<std::size_t>(c)] = m;
      ch_std[static_cast<std::size_t>(c)] =
          std::sqrt(std::max(0.0, sq[static_cast<std::size_t>(c)] / n - m * m));
    }
  }
};

// ---------------------------------------------------------------------------
// CIFAR binary record formats: 3073-byte records (label + 3x1024 planes) for
// CIFAR-10, 3074-byte records (coarse, fine, planes) for CIFAR-100.
// ---------------------------------------------------------------------------

inline Dataset load_cifar_binary(const std::string& path, CifarVariant variant) {
  const index_t record = variant == CifarVariant::cifar10 ? 3073 : 3074;
  const int classes = variant == CifarVariant::cifar10 ? 10 : 100;
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("load_cifar_binary: cannot open '" + path + "'");
  const std::streamoff size = is.tellg();
  if (size == 0 || size % record != 0)
    throw std::runtime_error("load_cifar_binary: '" + path + "' has " + std::to_string(size) +
                             " bytes, not a multiple of the " + std::to_string(record) +
                             "-byte record (truncated at byte " +
                             std::to_string((size / record) * record) + ")");
  is.seekg(0);
  Dataset ds;
  ds.classes = classes;
  ds.count = static_cast<index_t>(size / record);
  ds.pixels.resize(static_cast<std::size_t>(ds.count) * 3072);
  ds.labels.resize(static_cast<std::size_t>(ds.count));

  std::vector<std::uint8_t> rec(static_cast<std::size_t>(record));
  for (index_t i = 0; i < ds.count; ++i) {
    if (!is.read(reinterpret_cast<char*>(rec.data()), record))
      throw std::runtime_error("load_cifar_binary: short read in '" + path + "' at byte " +
                               std::to_string(i * record));
    const int label = variant == CifarVariant::cifar10 ? rec[0] : rec[1];  // fine label
    if (label >= classes)
      throw std::runtime_error("load_cifar_binary: label " + std::to_string(label) +
                               " out of range at byte offset " + std::to_string(i * record) +
                               " in '" + path + "'");
    ds.labels[static_cast<std::size_t>(i)] = label;
    const std::size_t hdr = variant == CifarVariant::cifar10 ? 1 : 2;
    std::copy(rec.begin() + static_cast<std::ptrdiff_t>(hdr), rec.end(),
              ds.pixels.begin() + static_cast<std::ptrdiff_t>(i) * 3072);
  }
  ds.compute_channel_stats();
  return ds;
}

inline std::vector<std::string> cifar_split_files(const std::string& dir, CifarVariant variant,
                                                  const std::string& split) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (variant == CifarVariant::cifar10) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i)
        files.push_back((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string());
    } else {
      files.push_back((fs::path(dir) / "test_batch.bin").string());
    }
  } else {
    files.push_back((fs::path(dir) / (split == "train" ? "train.bin" : "test.bin")).string());
  }
  return files;
}

inline Dataset load_cifar_split(const std::string& dir, CifarVariant variant,
                                const std::string& split) {
  Dataset ds;
  ds.classes = variant == CifarVariant::cifar10 ? 10 : 100;
  ds.split = split;
  for (const auto& f : cifar_split_files(dir, variant, split)) {
    Dataset part = load_cifar_binary(f, variant);
    ds.count += part.count;
    ds.pixels.insert(ds.pixels.end(), part.pixels.begin(), part.pixels.end());
    ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
  }
  ds.compute_channel_stats();
  return ds;
}

// Generic raw-binary manifest (dataset.json + uint8 image/label files); the
// extension path for non-CIFAR data.
inline Dataset load_manifest_dataset(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  const auto manifest_path = fs::path(dir) / "dataset.json";
  std::ifstream is(manifest_path);
  if (!is)
    throw std::runtime_error("load_manifest_dataset: missing '" + manifest_path.string() + "'");
  nlohmann::json j = nlohmann::json::parse(is);
  if (j.value("format", std::string{}) != "revode-raw-u8")
    throw std::runtime_error("load_manifest_dataset: unsupported format");
  Dataset ds;
  ds.channels = j.value("channels", 3);
  ds.height = j.value("height", 32);
  ds.width = j.value("width", 32);
  ds.classes = j.value("classes", 10);
  ds.split = split;
  const auto& sp = j.at("splits").at(split);
  const auto img_path = fs::path(dir) / sp.at("images").get<std::string>();
  const auto lbl_path = fs::path(dir) / sp.at("labels").get<std::string>();

  std::ifstream imgs(img_path, std::ios::binary | std::ios::ate);
  if (!imgs) throw std::runtime_error("load_manifest_dataset: cannot open " + img_path.string());
  const std::streamoff img_size = imgs.tellg();
  const index_t item = ds.channels * ds.height * ds.width;
  if (img_size % item != 0)
    throw std::runtime_error("load_manifest_dataset: image file size " + std::to_string(img_size) +
                             " not a multiple of " + std::to_string(item));
  ds.count = static_cast<index_t>(img_size / item);
  imgs.seekg(0);
  ds.pixels.resize(static_cast<std::size_t>(img_size));
  imgs.read(reinterpret_cast<char*>(ds.pixels.data()), img_size);

  std::ifstream lbls(lbl_path, std::ios::binary | std::ios::ate);
  if (!lbls) throw std::runtime_error("load_manifest_dataset: cannot open " + lbl_path.string());
  if (lbls.tellg() != static_cast<std::streamoff>(ds.count))
    throw std::runtime_error("load_manifest_dataset: label count does not match image count");
  lbls.seekg(0);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(ds.count));
  lbls.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamoff>(ds.count));
  ds.labels.assign(raw.begin(), raw.end());
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    if (ds.labels[i] >= ds.classes)
      throw std::runtime_error("load_manifest_dataset: label " + std::to_string(ds.labels[i]) +
                               " out of range at item " + std::to_string(i));
  ds.compute_channel_stats();
  return ds;
}

// Directory probe: manifest datasets, then CIFAR-10, then CIFAR-100 layout.
inline Dataset load_dataset_dir(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  if (fs::exists(fs::path(dir) / "dataset.json")) return load_manifest_dataset(dir, split);
  if (fs::exists(fs::path(dir) / "data_batch_1.bin") ||
      fs::exists(fs::path(dir) / "test_batch.bin"))
    return load_cifar_split(dir, CifarVariant::cifar10, split);
  if (fs::exists(fs::path(dir) / "train.bin"))
    return load_cifar_split(dir, CifarVariant::cifar100, split);
  throw std::runtime_error("load_dataset_dir: no recognized dataset layout under '" + dir + "'");
}

// ---------------------------------------------------------------------------
// Augmentation and batch assembly
// ---------------------------------------------------------------------------

enum class Standardize { per_image, per_channel };

inline Standardize parse_standardize(const std::string& s) {
  if (s == "per-image") return Standardize::per_image;
  if (s == "per-channel") return Standardize::per_channel;
  throw std::invalid_argument("unknown standardization '" + s + "' (per-image|per-channel)");
}

namespace detail {

template <typename T>
void standardize_image(T* img, index_t numel, Standardize mode, const Dataset& ds,
                       index_t channels, index_t plane) {
  if (mode == Standardize::per_image) {
    double mean = 0.0;
    for (index_t i = 0; i < numel; ++i) mean += static_cast<double>(img[i]);
    mean /= static_cast<double>(numel);
    double var = 0.0;
    for (index_t i = 0; i < numel; ++i) {
      const double d = static_cast<double>(img[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(numel);
    // stddev floor 1/sqrt(N) keeps constant images finite
    const double adj = std::max(std::sqrt(var), 1.0 / std::sqrt(static_cast<double>(numel)));
    for (index_t i = 0; i < numel; ++i)
      img[i] = static_cast<T>((static_cast<double>(img[i]) - mean) / adj);
  } else {
    if (static_cast<index_t>(ds.ch_mean.size()) != channels)
      throw std::invalid_argument(
          "standardize: per-channel mode requires dataset channel statistics");
    for (index_t c = 0; c < channels; ++c) {
      const double m = ds.ch_mean[static_cast<std::size_t>(c)];
      const double s = std::max(ds.ch_std[static_cast<std::size_t>(c)], 1e-6);
      for (index_t p = 0; p < plane; ++p)
        img[c * plane + p] = static_cast<T>((static_cast<double>(img[c * plane + p]) - m) / s);
    }
  }
}

}  // namespace detail

// Training-time augmentation for one image: pad 4 zeros per side, random
// crop back to the original size, horizontal flip with probability 1/2,
// then per-image standardization.
template <typename T>
void augment_image(const Dataset& ds, index_t item, Rng& rng, Standardize mode, T* out) {
  const index_t c_n = ds.channels, h = ds.height, w = ds.width;
  const index_t pad = 4;
  const index_t dy = static_cast<index_t>(rng.uniform_int(static_cast<std::uint64_t>(2 * pad + 1)));
  const index_t dx = static_cast<index_t>(rng.uniform_int(static_cast<std::uint64_t>(2 * pad + 1)));
  const bool flip = rng.uniform() < 0.5;
  const std::uint8_t* src = ds.image(item);
  const index_t plane = h * w;
  for (index_t c = 0; c < c_n; ++c)
    for (index_t y = 0; y < h; ++y)
      for (index_t x = 0; x < w; ++x) {
        const index_t sy = y + dy - pad;
        const index_t sx0 = x + dx - pad;
        const index_t sx = flip ? (w - 1 - sx0) : sx0;
        T v = T{0};
        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
          v = static_cast<T>(src[c * plane + sy * w + sx] / 255.0);
        out[c * plane + y * w + x] = v;
      }
  detail::standardize_image(out, c_n * plane, mode, ds, c_n, plane);
}

// Evaluation path: standardization only.
template <typename T>
void prepare_image(const Dataset& ds, index_t item, Standardize mode, T* out) {
  const index_t plane = ds.height * ds.width;
  const std::uint8_t* src = ds.image(item);
  for (index_t i = 0; i < ds.channels * plane; ++i) out[i] = static_cast<T>(src[i] / 255.0);
  detail::standardize_image(out, ds.channels * plane, mode, ds, ds.channels, plane);
}

// Assembles a batch. Augmentation randomness is drawn from a per-item stream
// keyed by (seed, epoch, item index), so results do not depend on assembly
// order or worker count.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const Dataset& ds,
                                                  const std::vector<index_t>& items,
                                                  bool augment, Standardize mode,
                                                  std::uint64_t seed, long epoch) {
  Tensor<T> batch(static_cast<index_t>(items.size()), ds.channels, ds.height, ds.width);
  std::vector<int> labels(items.size());
  const index_t item_sz = ds.channels * ds.height * ds.width;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const index_t item = items[i];
    if (item < 0 || item >= ds.count)
      throw std::invalid_argument("make_batch: item " + std::to_string(item) + " out of range");
    T* out = batch.data.data() + static_cast<std::size_t>(i) * item_sz;
    if (augment) {
      Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(ds.count) +
                                      static_cast<std::uint64_t>(item));
      augment_image(ds, item, rng, mode, out);
    } else {
      prepare_image(ds, item, mode, out);
    }
    labels[i] = ds.labels[static_cast<std::size_t>(item)];
  }
  return {std::move(batch), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

// Seed-deterministic stratified sample without replacement: an equal count
// per class (floor(fraction * class size)), remainder dropped.
inline std::vector<index_t> subsample_indices(const Dataset& ds, double fraction,
                                              std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw std::invalid_argument("subsample: fraction must be in (0,1], got " +
                                std::to_string(fraction));
  std::vector<std::vector<index_t>> per_class(static_cast<std::size_t>(ds.classes));
  for (index_t i = 0; i < ds.count; ++i)
    per_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<index_t> picked;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    auto& cls = per_class[c];
    if (cls.empty()) continue;
    const std::size_t take = static_cast<std::size_t>(
        fraction * static_cast<double>(cls.size()) + 1e-9);
    if (take < 1)
      throw std::invalid_argument("subsample: fraction " + std::to_string(fraction) +
                                  " yields no images for class " + std::to_string(c));
    Rng rng = Rng::stream(seed, c);
    rng.shuffle(cls.begin(), cls.end());
    picked.insert(picked.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(take));
  }
  Rng mix = Rng::stream(seed, 0xfeedULL);
  mix.shuffle(picked.begin(), picked.end());
  return picked;
}

inline Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed) {
  const auto idx = subsample_indices(ds, fraction, seed);
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.classes = ds.classes;
  out.split = ds.split;
  out.count = static_cast<index_t>(idx.size());
  const index_t item = ds.channels * ds.height * ds.width;
  out.pixels.resize(static_cast<std::size_t>(out.count * item));
  out.labels.resize(static_cast<std::size_t>(out.count));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::uint8_t* src = ds.image(idx[i]);
    std::copy(src, src + item, out.pixels.begin() + static_cast<std::ptrdiff_t>(i) * item);
    out.labels[i] = ds.labels[static_cast<std::size_t>(idx[i])];
  }
  out.compute_channel_stats();
  return out;
}

}  // namespace revode
