#pragma once

// SIBW: a versioned little-endian container of named float64 tensors.
//
//   "SIBW" | u32 version | u32 count |
//   count x ( u16 name_len | name bytes | u8 rank | rank x u32 extent |
//             numel x f64 )
//
// Used for model weights, dataset caches and attack archives.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "sibling/error.hpp"
#include "sibling/tensor.hpp"

namespace sibling {

inline constexpr char kContainerMagic[4] = {'S', 'I', 'B', 'W'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(char(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  std::uint64_t uint(int bytes) {
    need(std::size_t(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= std::uint64_t(std::uint8_t(in_[pos_ + std::size_t(i)])) << (8 * i);
    }
    pos_ += std::size_t(bytes);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint(8)); }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw Error(ErrorCode::kFormat,
                  "SIBW: unexpected end of data at byte " + std::to_string(pos_));
    }
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.raw(std::string_view(kContainerMagic, 4));
  w.u32(kContainerVersion);
  w.u32(std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) {
      throw Error(ErrorCode::kArgument, "SIBW: tensor name too long");
    }
    w.u16(std::uint16_t(name.size()));
    w.raw(name);
    w.u8(std::uint8_t(t.rank()));
    for (std::size_t e : t.shape()) w.u32(std::uint32_t(e));
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

inline std::vector<NamedTensor> decode_container(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw Error(ErrorCode::kFormat, "SIBW: bad magic");
  }
  r.raw(4);
  const auto version = std::uint32_t(r.uint(4));
  if (version != kContainerVersion) {
    throw Error(ErrorCode::kFormat,
                "SIBW: version mismatch (file " + std::to_string(version) +
                    ", expected " + std::to_string(kContainerVersion) + ")");
  }
  const auto count = std::uint32_t(r.uint(4));
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const auto len = std::size_t(r.uint(2));
    nt.name = std::string(r.raw(len));
    const auto rank = std::size_t(r.uint(1));
    Shape shape(rank);
    for (auto& e : shape) {
      e = std::size_t(r.uint(4));
      if (e == 0) {
        throw Error(ErrorCode::kFormat, "SIBW: zero extent in " + nt.name);
      }
    }
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = r.f64();
    nt.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  if (!r.at_end()) {
    throw Error(ErrorCode::kFormat, "SIBW: trailing bytes after last tensor");
  }
  return out;
}

inline const Tensor& find_tensor(const std::vector<NamedTensor>& tensors,
                                 std::string_view name) {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw Error(ErrorCode::kFormat,
              "SIBW: missing tensor '" + std::string(name) + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kMissing, "cannot open " + path.string());
  }
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes through a temporary file and renames it into place.
inline void write_file(const std::filesystem::path& path,
                       std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot rename into " + path.string());
}

inline void save_container(const std::filesystem::path& path,
                           const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_container(tensors));
}

inline std::vector<NamedTensor> load_container(
    const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

}  // namespace sibling
