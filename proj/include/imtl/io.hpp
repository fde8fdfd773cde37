#pragma once

// IMTD binary tensor files.
//
//   offset  size        field
//   0       4           magic "IMTD"
//   4       4           version, u32 little-endian (= 1)
//   8       4           ndim, u32 little-endian
//   12      8*ndim      dims, u64 little-endian each
//   ...     8*prod      values, IEEE-754 float64 little-endian, vectorization order
//
// Matrices are stored as 2-way tensors (rows, cols), i.e. column-major.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "imtl/tensor.hpp"

namespace imtl::io {

inline constexpr std::array<char, 4> kMagic{'I', 'M', 'T', 'D'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw FormatError("IMTD: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const DenseTensor& t) {
  os.write(kMagic.data(), kMagic.size());
  detail::put_le<std::uint32_t>(os, kVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (Index p : t.dims()) detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(p));
  for (Index k = 0; k < t.size(); ++k) detail::put_le<double>(os, t.values()[k]);
  if (!os) throw FormatError("IMTD: write failed");
}

inline DenseTensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size())) throw FormatError("IMTD: truncated header");
  if (magic != kMagic) throw FormatError("IMTD: bad magic bytes");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kVersion) throw FormatError("IMTD: unsupported version " + std::to_string(version));
  const auto ndim = detail::get_le<std::uint32_t>(is);
  if (ndim == 0) throw FormatError("IMTD: ndim must be >= 1");
  Dims dims;
  for (std::uint32_t k = 0; k < ndim; ++k) {
    const auto p = detail::get_le<std::uint64_t>(is);
    if (p == 0) throw FormatError("IMTD: zero dimension");
    dims.push_back(static_cast<Index>(p));
  }
  Vector values(product(dims));
  for (Index k = 0; k < values.size(); ++k) values[k] = detail::get_le<double>(is);
  return DenseTensor(std::move(dims), std::move(values));
}

inline void save_tensor(const std::filesystem::path& path, const DenseTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("IMTD: cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline DenseTensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("IMTD: cannot open " + path.string());
  return read_tensor(is);
}

inline DenseTensor matrix_as_tensor(const Matrix& m) {
  return DenseTensor({m.rows(), m.cols()}, Eigen::Map<const Vector>(m.data(), m.size()));
}

inline Matrix tensor_as_matrix(const DenseTensor& t) {
  if (t.ndim() == 1) return Eigen::Map<const Matrix>(t.values().data(), t.dim(0), 1);
  if (t.ndim() != 2) throw FormatError("IMTD: expected a matrix, got " + dims_to_string(t.dims()));
  return Eigen::Map<const Matrix>(t.values().data(), t.dim(0), t.dim(1));
}

inline void save_matrix(const std::filesystem::path& path, const Matrix& m) { save_tensor(path, matrix_as_tensor(m)); }
inline Matrix load_matrix(const std::filesystem::path& path) { return tensor_as_matrix(load_tensor(path)); }

}  // namespace imtl::io
