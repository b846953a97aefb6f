#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcg/tensor.hpp"

namespace pcg::ad {

// Parameter checkpoint: header (magic, version, tensor count), then per
// tensor: name length, name, rank, extents, little-endian float32 payload.
// Round trips bit-exactly.

inline constexpr char kCheckpointMagic[8] = {'P', 'C', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  Shape shape;
  std::vector<float> data;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::map<std::string, NamedArray>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, arr] : tensors) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(arr.shape.size()));
    for (int d : arr.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(arr.data.data()),
             static_cast<std::streamsize>(arr.data.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline std::map<std::string, NamedArray> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::read_u32(is);
  std::map<std::string, NamedArray> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = detail::read_u32(is);
    NamedArray arr;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = static_cast<int>(detail::read_u32(is));
      arr.shape.push_back(d);
      n *= static_cast<std::size_t>(d);
    }
    arr.data.resize(n);
    is.read(reinterpret_cast<char*>(arr.data.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name + " in " + path);
    out.emplace(std::move(name), std::move(arr));
  }
  return out;
}

template <class T>
NamedArray to_array(const TensorT<T>& t) {
  NamedArray arr;
  arr.shape = t.shape;
  arr.data.assign(t.value.begin(), t.value.end());
  return arr;
}

template <class T>
void from_array(const NamedArray& arr, TensorT<T>& t) {
  if (arr.shape != t.shape)
    throw std::runtime_error("checkpoint: shape mismatch for " + t.name + ": file " +
                             shape_str(arr.shape) + " vs model " + shape_str(t.shape));
  t.value.assign(arr.data.begin(), arr.data.end());
}

}  // namespace pcg::ad
