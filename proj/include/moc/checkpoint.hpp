#pragma once

// Checkpoint = text manifest + one little-endian float32 blob.
//
//   moc-checkpoint 1
//   blob <file name relative to the manifest>
//   config <single-line JSON>
//   tensor <name> <d0,d1,...> <byte offset> <element count>
//   ...
//
// Tensors are stored back to back in manifest order (sorted by name).

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "moc/autodiff.hpp"

namespace moc {

struct Checkpoint {
  ParamStore params;
  std::string config_json;
};

namespace detail {

inline void write_f32_le(std::ostream& os, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline double read_f32_le(const unsigned char* b) {
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace detail

// manifest: path of the manifest file; the blob is written next to it with
// the extension replaced by ".bin".
inline void save_checkpoint(const std::filesystem::path& manifest, const ParamStore& ps,
                            const std::string& config_json) {
  require(config_json.find('\n') == std::string::npos, "checkpoint config must be a single line");
  std::filesystem::path blob = manifest;
  blob.replace_extension(".bin");
  std::ofstream mf(manifest);
  std::ofstream bf(blob, std::ios::binary);
  if (!mf || !bf) throw Error("cannot write checkpoint " + manifest.string());
  mf << "moc-checkpoint 1\n";
  mf << "blob " << blob.filename().string() << "\n";
  mf << "config " << config_json << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : ps.params()) {
    mf << "tensor " << name << " ";
    for (std::size_t d = 0; d < t.shape().size(); ++d) mf << (d ? "," : "") << t.shape()[d];
    mf << " " << offset << " " << t.size() << "\n";
    for (double v : t.values()) detail::write_f32_le(bf, v);
    offset += 4 * t.size();
  }
  if (!mf || !bf) throw Error("failed writing checkpoint " + manifest.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream mf(manifest);
  if (!mf) throw Error("cannot open checkpoint manifest " + manifest.string());
  std::string line, tag;
  std::getline(mf, line);
  if (line != "moc-checkpoint 1") throw Error("not a checkpoint manifest: " + manifest.string());
  Checkpoint ck;
  std::filesystem::path blob;
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset, count;
  };
  std::vector<Entry> entries;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    is >> tag;
    if (tag == "blob") {
      std::string f;
      is >> f;
      blob = manifest.parent_path() / f;
    } else if (tag == "config") {
      ck.config_json = line.substr(7);
    } else if (tag == "tensor") {
      Entry e;
      std::string dims;
      is >> e.name >> dims >> e.offset >> e.count;
      std::stringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, ',')) e.shape.push_back(std::stoul(d));
      if (!is || Tensor::count(e.shape) != e.count) throw Error("malformed checkpoint entry: " + line);
      entries.push_back(std::move(e));
    } else {
      throw Error("unknown checkpoint manifest line: " + line);
    }
  }
  std::ifstream bf(blob, std::ios::binary);
  if (!bf) throw Error("cannot open checkpoint blob " + blob.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  for (auto& e : entries) {
    if (e.offset + 4 * e.count > bytes.size()) throw Error("checkpoint blob truncated at " + e.name);
    Tensor t(e.shape);
    for (std::size_t k = 0; k < e.count; ++k) t[k] = detail::read_f32_le(bytes.data() + e.offset + 4 * k);
    ck.params.add(e.name, std::move(t));
  }
  return ck;
}

// Rounds every parameter to float32 precision, i.e. the values a checkpoint stores.
inline void round_to_f32(ParamStore& ps) {
  for (auto& [_, t] : ps.params())
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace moc
