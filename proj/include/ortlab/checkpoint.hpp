#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ortlab/error.hpp"
#include "ortlab/tensor.hpp"

namespace ortlab {

// Checkpoint file layout:
//   [8]  magic "ORTCKPT1"
//   [8]  u64 LE manifest byte length
//   [..] manifest JSON: dtype, meta, tensor table (name/shape/offset), total
//   [..] blob: 32-bit LE floats, tensors at their element offsets
//
// Tensors are ordered by name, so save -> load -> save is byte-identical.

inline constexpr char kCheckpointMagic[8] = {'O', 'R', 'T', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  std::map<std::string, Tensor<float>> tensors;
  nlohmann::json meta;
};

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["dtype"] = "f32";
  manifest["meta"] = ckpt.meta;
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {  // std::map: name order
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    entry["offset"] = offset;
    table.push_back(entry);
    offset += tensor.size();
  }
  manifest["tensors"] = table;
  manifest["total"] = offset;
  std::string mjson = manifest.dump();

  std::string out;
  out.reserve(16 + mjson.size() + offset * 4);
  out.append(kCheckpointMagic, 8);
  std::uint64_t mlen = mjson.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((mlen >> (8 * i)) & 0xFF));
  out += mjson;
  for (const auto& [name, tensor] : ckpt.tensors)
    for (std::size_t i = 0; i < tensor.size(); ++i)
      detail::put_u32le(out, std::bit_cast<std::uint32_t>(tensor[i]));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ComputeError("checkpoint: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ComputeError("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), "checkpoint: cannot open: " + path);
  std::string data((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  require(data.size() >= 16, "checkpoint: file too short: " + path);
  require(data.compare(0, 8, kCheckpointMagic, 8) == 0,
          "checkpoint: corrupt magic: " + path);
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i)
    mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[8 + i]))
            << (8 * i);
  require(16 + mlen <= data.size(), "checkpoint: manifest length mismatch: " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(data.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint: bad manifest JSON: " + std::string(e.what()));
  }
  require(manifest.value("dtype", "") == std::string("f32"),
          "checkpoint: unknown dtype");
  std::size_t total = manifest.at("total").get<std::size_t>();
  std::size_t blob_off = 16 + mlen;
  require(data.size() - blob_off == total * 4,
          "checkpoint: blob length mismatch: " + path);

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  std::size_t expected = 0;
  for (const auto& entry : manifest.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    std::size_t offset = entry.at("offset").get<std::size_t>();
    std::size_t n = shape_numel(shape);
    require(offset == expected, "checkpoint: tensor offsets out of order");
    require(offset + n <= total, "checkpoint: manifest shape product mismatch");
    expected = offset + n;
    std::vector<float> vals(n);
    const unsigned char* base =
        reinterpret_cast<const unsigned char*>(data.data()) + blob_off + offset * 4;
    for (std::size_t i = 0; i < n; ++i)
      vals[i] = std::bit_cast<float>(detail::get_u32le(base + i * 4));
    ckpt.tensors.emplace(std::move(name), Tensor<float>(shape, std::move(vals)));
  }
  require(expected == total, "checkpoint: manifest shape product mismatch");
  return ckpt;
}

}  // namespace ortlab
