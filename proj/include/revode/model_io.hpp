#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "revode/network.hpp"

namespace revode {

using json = nlohmann::json;

inline json arch_to_json(const ArchSpec& a) {
  json units = json::array();
  for (const auto& u : a.units) units.push_back({{"blocks", u.blocks}, {"channels", u.channels}});
  return json{{"kind", to_string(a.kind)},
              {"units", units},
              {"in_channels", a.in_channels},
              {"in_h", a.in_h},
              {"in_w", a.in_w},
              {"classes", a.classes},
              {"h", a.h},
              {"activation", to_string(a.act)},
              {"stem_kernel", a.stem_kernel},
              {"block_kernel", a.block_kernel},
              {"leapfrog_init", to_string(a.leapfrog_init)}};
}

inline ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  a.kind = parse_block_kind(j.at("kind").get<std::string>());
  for (const auto& u : j.at("units"))
    a.units.push_back({u.at("blocks").get<int>(), u.at("channels").get<index_t>()});
  a.in_channels = j.value("in_channels", 3);
  a.in_h = j.value("in_h", 32);
  a.in_w = j.value("in_w", 32);
  a.classes = j.value("classes", 10);
  a.h = j.value("h", 0.1);
  a.act = parse_activation(j.value("activation", std::string("relu")));
  a.stem_kernel = j.value("stem_kernel", 3);
  a.block_kernel = j.value("block_kernel", 3);
  a.leapfrog_init = parse_leapfrog_init(j.value("leapfrog_init", std::string("as-printed")));
  a.validate();
  return a;
}

namespace detail {

struct TensorEntry {
  std::string name;
  std::vector<index_t> shape;
  std::size_t offset = 0;  // bytes from the start of the binary section
  std::size_t count = 0;
};

// Walks parameters in for_each_param order, recording proper shapes.
template <typename T>
std::vector<TensorEntry> manifest_entries(const Network<T>& net) {
  std::vector<TensorEntry> entries;
  std::size_t offset = 0;
  auto push = [&entries, &offset](std::string name, std::vector<index_t> shape,
                                  std::size_t count) {
    entries.push_back({std::move(name), std::move(shape), offset, count});
    offset += count * sizeof(float);
  };
  push("stem.kernel",
       {net.stem_k.out_c, net.stem_k.in_c, net.stem_k.kh, net.stem_k.kw},
       net.stem_k.data.size());
  push("stem.bias", {static_cast<index_t>(net.stem_b.size())}, net.stem_b.size());
  for (std::size_t u = 0; u < net.units.size(); ++u)
    for (std::size_t j = 0; j < net.units[u].size(); ++j) {
      const auto& p = net.units[u][j];
      const std::string prefix = "unit" + std::to_string(u) + ".block" + std::to_string(j) + ".";
      push(prefix + "k1", {p.k1.out_c, p.k1.in_c, p.k1.kh, p.k1.kw}, p.k1.data.size());
      if (!p.k2.empty())
        push(prefix + "k2", {p.k2.out_c, p.k2.in_c, p.k2.kh, p.k2.kw}, p.k2.data.size());
      push(prefix + "b1", {static_cast<index_t>(p.b1.size())}, p.b1.size());
      if (!p.b2.empty()) push(prefix + "b2", {static_cast<index_t>(p.b2.size())}, p.b2.size());
    }
  push("head.weight", {net.head.out, net.head.in}, net.head.w.size());
  push("head.bias", {static_cast<index_t>(net.head.b.size())}, net.head.b.size());
  return entries;
}

inline void write_f32_le(std::ostream& os, float v) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff),
                         static_cast<char>((bits >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline float read_f32_le(std::istream& is) {
  unsigned char bytes[4];
  is.read(reinterpret_cast<char*>(bytes), 4);
  const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                             (static_cast<std::uint32_t>(bytes[1]) << 8) |
                             (static_cast<std::uint32_t>(bytes[2]) << 16) |
                             (static_cast<std::uint32_t>(bytes[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

// Model file: one line of JSON (arch + tensor manifest), then raw
// little-endian float32 arrays in manifest order. Parameters are stored in
// float32 regardless of the in-memory precision.
template <typename T>
void save_model(const Network<T>& net, const std::string& path) {
  auto entries = detail::manifest_entries(net);
  json manifest = json::array();
  for (const auto& e : entries)
    manifest.push_back(
        {{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"dtype", "f32"}});
  json header{{"format", "revode-checkpoint"},
              {"version", 1},
              {"arch", arch_to_json(net.arch)},
              {"tensors", manifest}};

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open '" + path + "' for writing");
  os << header.dump() << "\n";
  for_each_param(const_cast<Network<T>&>(net), [&os](const std::string&, std::vector<T>& v) {
    for (const T x : v) detail::write_f32_le(os, static_cast<float>(x));
  });
  if (!os) throw std::runtime_error("save_model: write failed for '" + path + "'");
}

template <typename T>
Network<T> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open '" + path + "'");
  std::string header_line;
  if (!std::getline(is, header_line))
    throw std::runtime_error("load_model: missing header in '" + path + "'");
  json header = json::parse(header_line);
  if (header.value("format", std::string{}) != "revode-checkpoint")
    throw std::runtime_error("load_model: '" + path + "' is not a checkpoint file");
  if (header.value("version", 0) != 1)
    throw std::runtime_error("load_model: unsupported checkpoint version");
  ArchSpec arch = arch_from_json(header.at("arch"));
  Network<T> net = init_network<T>(arch, 0);

  const auto manifest = header.at("tensors");
  std::size_t idx = 0;
  const std::streampos blob_start = is.tellg();
  for_each_param(net, [&](const std::string& name, std::vector<T>& v) {
    if (idx >= manifest.size())
      throw std::runtime_error("load_model: manifest ended before parameter '" + name + "'");
    const auto& entry = manifest[idx];
    if (entry.at("name").get<std::string>() != name)
      throw std::runtime_error("load_model: manifest order mismatch, expected '" + name +
                               "', found '" + entry.at("name").get<std::string>() + "'");
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    is.seekg(blob_start + static_cast<std::streamoff>(offset));
    for (auto& x : v) {
      x = static_cast<T>(detail::read_f32_le(is));
      if (!is)
        throw std::runtime_error("load_model: truncated blob while reading '" + name +
                                 "' at byte offset " + std::to_string(offset));
    }
    ++idx;
  });
  if (idx != manifest.size())
    throw std::runtime_error("load_model: manifest lists extra tensors");
  return net;
}

}  // namespace revode
