#pragma once

// MFT1 tensor records and the named-tensor checkpoint container.
//
// MFT1 (little-endian):  "MFT1" | u32 rank | rank x u64 extent | f64 payload
// Container (MFC1):      "MFC1" | u32 count | count x (u32 name_len, name,
//                        u64 offset) | MFT1 records at the listed absolute
//                        file offsets, in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "monoformer/tensor.hpp"

namespace monoformer {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("truncated record at byte " + std::to_string(pos));
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to " + path);
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out = "MFT1";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
  for (double v : t.values()) detail::put_le<double>(out, v);
  return out;
}

inline Tensor decode_tensor(const std::string& bytes, std::size_t& pos) {
  if (bytes.compare(pos, 4, "MFT1") != 0) throw FormatError("missing MFT1 magic at byte " + std::to_string(pos));
  pos += 4;
  const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
  if (rank == 0 || rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = detail::get_le<std::uint64_t>(bytes, pos);
    if (e == 0) throw FormatError("zero extent in MFT1 record");
    n *= e;
  }
  if (pos + n * 8 > bytes.size()) throw FormatError("MFT1 payload truncated");
  std::vector<double> data(n);
  for (auto& v : data) v = detail::get_le<double>(bytes, pos);
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor decode_tensor(const std::string& bytes) {
  std::size_t pos = 0;
  Tensor t = decode_tensor(bytes, pos);
  if (pos != bytes.size()) throw FormatError("trailing bytes after MFT1 record");
  return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) { detail::write_file(path, encode_tensor(t)); }
inline Tensor load_tensor(const std::string& path) { return decode_tensor(detail::read_file(path)); }

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline std::string encode_container(const NamedTensors& entries) {
  std::size_t header = 4 + 4;
  for (const auto& [name, t] : entries) header += 4 + name.size() + 8;
  std::string body;
  std::vector<std::uint64_t> offsets;
  for (const auto& [name, t] : entries) {
    offsets.push_back(header + body.size());
    body += encode_tensor(t);
  }
  std::string out = "MFC1";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries[i].first.size()));
    out += entries[i].first;
    detail::put_le<std::uint64_t>(out, offsets[i]);
  }
  return out + body;
}

inline NamedTensors decode_container(const std::string& bytes) {
  if (bytes.compare(0, 4, "MFC1") != 0) throw FormatError("missing MFC1 magic");
  std::size_t pos = 4;
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  std::vector<std::pair<std::string, std::uint64_t>> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw FormatError("container manifest truncated");
    std::string name = bytes.substr(pos, len);
    pos += len;
    manifest.emplace_back(std::move(name), detail::get_le<std::uint64_t>(bytes, pos));
  }
  NamedTensors out;
  for (auto& [name, off] : manifest) {
    std::size_t p = off;
    out.emplace_back(name, decode_tensor(bytes, p));
  }
  return out;
}

inline void save_container(const std::string& path, const NamedTensors& entries) {
  detail::write_file(path, encode_container(entries));
}
inline NamedTensors load_container(const std::string& path) { return decode_container(detail::read_file(path)); }

}  // namespace monoformer
