#pragma once

// Binary containers (single matrix, named tensor table), CSV matrices and
// small file helpers. All integers are little-endian u32, all reals
// little-endian IEEE-754 binary64, independent of the host.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cadence/error.hpp"
#include "cadence/tensor.hpp"

namespace cadence::io {

inline constexpr char kMatrixMagic[4] = {'C', 'D', 'M', 'X'};
inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'C', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw DataError(std::string("truncated ") + what);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, "u32 field");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8, "f64 field");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | b[i];
  return std::bit_cast<double>(v);
}

inline void put_tensor_body(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.values()) put_f64(os, v);
}

inline Tensor get_tensor_body(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  if (rank == 0 || rank > 8) throw DataError("tensor rank " + std::to_string(rank) + " out of range");
  Tensor::Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = get_u32(is);
    if (d == 0) throw DataError("zero tensor dimension");
    count *= d;
    if (count > (std::uint64_t{1} << 32)) throw DataError("tensor too large");
  }
  std::vector<double> data(count);
  for (double& v : data) v = get_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

inline void check_magic(std::istream& is, const char (&magic)[4], const char* what) {
  char m[4];
  read_exact(is, m, 4, what);
  if (std::memcmp(m, magic, 4) != 0) throw DataError(std::string("bad magic for ") + what);
  const std::uint32_t version = get_u32(is);
  if (version != kFormatVersion) {
    throw DataError(std::string(what) + ": unsupported version " + std::to_string(version));
  }
}

}  // namespace detail

/// magic "CDMX", version, rank, dims..., row-major data.
inline void write_matrix(std::ostream& os, const Tensor& t) {
  os.write(kMatrixMagic, 4);
  detail::put_u32(os, kFormatVersion);
  detail::put_tensor_body(os, t);
}

inline Tensor read_matrix(std::istream& is) {
  detail::check_magic(is, kMatrixMagic, "matrix container");
  return detail::get_tensor_body(is);
}

using TensorTable = std::map<std::string, Tensor>;

/// magic "CDCK", version, count, then per entry: name length, name bytes,
/// rank, dims..., data. Entries are written in name order.
inline void write_checkpoint(std::ostream& os, const TensorTable& table) {
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_tensor_body(os, t);
  }
}

inline TensorTable read_checkpoint(std::istream& is) {
  detail::check_magic(is, kCheckpointMagic, "checkpoint");
  const std::uint32_t count = detail::get_u32(is);
  TensorTable table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(is);
    if (len == 0 || len > 4096) throw DataError("checkpoint: bad tensor name length");
    std::string name(len, '\0');
    detail::read_exact(is, name.data(), len, "tensor name");
    if (!table.emplace(name, detail::get_tensor_body(is)).second) {
      throw DataError("checkpoint: duplicate tensor '" + name + "'");
    }
  }
  return table;
}

/// Rows as lines, full precision.
inline void write_csv(std::ostream& os, const Tensor& t) {
  if (t.rank() > 2) throw ShapeError("write_csv: expected a vector or matrix");
  const std::size_t rows = t.rank() == 2 ? t.rows() : t.size();
  const std::size_t cols = t.rank() == 2 ? t.cols() : 1;
  os << std::setprecision(17);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c) os << ',';
      os << t[r * cols + c];
    }
    os << '\n';
  }
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a sibling temporary and renames, so readers never observe
/// a half-written file.
inline void write_file_atomic(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, p);
}

template <class Fn>
void write_with(const std::filesystem::path& p, Fn&& fn) {
  std::ostringstream ss(std::ios::binary);
  fn(ss);
  write_file_atomic(p, ss.str());
}

}  // namespace cadence::io
