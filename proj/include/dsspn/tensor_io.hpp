#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dsspn/tensor.hpp"

// Portable binary tensor file:
//   "DSPN" | version u8 (1) | dtype u8 (0 f32, 1 i32) | rank u8 |
//   rank x u32 extents (LE) | row-major payload (LE)
namespace dsspn::io {

enum class DType : std::uint8_t { kFloat32 = 0, kInt32 = 1 };

inline constexpr std::array<char, 4> kMagic{'D', 'S', 'P', 'N'};
inline constexpr std::uint8_t kVersion = 1;

struct TensorFile {
  DType dtype{DType::kFloat32};
  std::vector<std::uint32_t> extents;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;

  std::size_t count() const {
    std::size_t c = 1;
    for (auto e : extents) c *= e;
    return c;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("DSPN: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_dspn(std::ostream& os, const TensorFile& tf) {
  if (tf.extents.size() > 255) throw IoError("DSPN: rank exceeds 255");
  const std::size_t n = tf.count();
  if ((tf.dtype == DType::kFloat32 ? tf.f32.size() : tf.i32.size()) != n) {
    throw IoError("DSPN: payload length does not match extents");
  }
  os.write(kMagic.data(), 4);
  const char header[3] = {static_cast<char>(kVersion), static_cast<char>(tf.dtype), static_cast<char>(tf.extents.size())};
  os.write(header, 3);
  for (auto e : tf.extents) detail::put_u32(os, e);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = tf.dtype == DType::kFloat32 ? std::bit_cast<std::uint32_t>(tf.f32[i])
                                                     : static_cast<std::uint32_t>(tf.i32[i]);
    detail::put_u32(os, bits);
  }
  if (!os) throw IoError("DSPN: write failed");
}

inline TensorFile read_dspn(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic.data(), 4) != 0) throw IoError("DSPN: bad magic");
  char header[3];
  if (!is.read(header, 3)) throw IoError("DSPN: truncated header");
  if (static_cast<std::uint8_t>(header[0]) != kVersion) {
    throw IoError(str_cat("DSPN: unsupported version ", static_cast<int>(static_cast<std::uint8_t>(header[0]))));
  }
  TensorFile tf;
  const auto dt = static_cast<std::uint8_t>(header[1]);
  if (dt > 1) throw IoError(str_cat("DSPN: unknown dtype ", static_cast<int>(dt)));
  tf.dtype = static_cast<DType>(dt);
  const auto rank = static_cast<std::uint8_t>(header[2]);
  for (std::uint8_t r = 0; r < rank; ++r) tf.extents.push_back(detail::get_u32(is));
  const std::size_t n = tf.count();
  if (tf.dtype == DType::kFloat32) {
    tf.f32.resize(n);
    for (std::size_t i = 0; i < n; ++i) tf.f32[i] = std::bit_cast<float>(detail::get_u32(is));
  } else {
    tf.i32.resize(n);
    for (std::size_t i = 0; i < n; ++i) tf.i32[i] = static_cast<std::int32_t>(detail::get_u32(is));
  }
  return tf;
}

inline void save_file(const std::filesystem::path& path, const TensorFile& tf) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write_dspn(os, tf);
}

inline TensorFile load_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  return read_dspn(is);
}

// Float tensor with explicit on-disk extents (their product must match).
template <typename T>
TensorFile to_file(const Tensor<T>& t, std::vector<std::uint32_t> extents) {
  TensorFile tf;
  tf.dtype = DType::kFloat32;
  tf.extents = std::move(extents);
  if (tf.count() != t.size()) throw IoError("DSPN: extents do not match tensor size");
  tf.f32.reserve(t.size());
  for (T v : t.data()) tf.f32.push_back(static_cast<float>(v));
  return tf;
}

// Reads a float payload into `shape`; the element count must agree.
template <typename T>
Tensor<T> from_file(const TensorFile& tf, Shape shape) {
  if (tf.dtype != DType::kFloat32) throw IoError("DSPN: expected float32 payload");
  if (tf.count() != shape.size()) {
    throw IoError(str_cat("DSPN: element count ", tf.count(), " does not fit shape ", shape.str()));
  }
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(tf.f32[i]);
  return t;
}

// Images are stored as rank-3 (c, h, w) and loaded as (1, c, h, w).
template <typename T>
void save_image(const std::filesystem::path& path, const Tensor<T>& image) {
  const Shape s = image.shape();
  if (s.n != 1) throw IoError("save_image expects a single image");
  save_file(path, to_file(image, {static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                                  static_cast<std::uint32_t>(s.w)}));
}

template <typename T>
Tensor<T> load_image(const std::filesystem::path& path) {
  TensorFile tf = load_file(path);
  if (tf.extents.size() == 3) return from_file<T>(tf, Shape{1, tf.extents[0], tf.extents[1], tf.extents[2]});
  if (tf.extents.size() == 4 && tf.extents[0] == 1) {
    return from_file<T>(tf, Shape{1, tf.extents[1], tf.extents[2], tf.extents[3]});
  }
  throw IoError("image file must have rank 3 (c,h,w): " + path.string());
}

inline void save_label_map(const std::filesystem::path& path, const LabelMap& labels) {
  TensorFile tf;
  tf.dtype = DType::kInt32;
  tf.extents = {static_cast<std::uint32_t>(labels.height), static_cast<std::uint32_t>(labels.width)};
  tf.i32.assign(labels.values.begin(), labels.values.end());
  save_file(path, tf);
}

inline LabelMap load_label_map(const std::filesystem::path& path) {
  TensorFile tf = load_file(path);
  if (tf.dtype != DType::kInt32 || tf.extents.size() != 2) {
    throw IoError("label map must be a rank-2 int32 DSPN tensor: " + path.string());
  }
  LabelMap m(tf.extents[0], tf.extents[1]);
  m.values.assign(tf.i32.begin(), tf.i32.end());
  return m;
}

}  // namespace dsspn::io
