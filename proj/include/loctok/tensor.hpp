#pragma once

// Dense row-major grids and their on-disk forms.
//
// Binary container (all integers little-endian):
//   offset  size  field
//   0       8     magic "LTKGRID\0"
//   8       4     u32 format version (1)
//   12      4     u32 length L of the generator id
//   16      L     generator id bytes (ASCII, no terminator)
//   16+L    8     u64 rows
//   24+L    8     u64 cols
//   32+L    8     u64 dim
//   40+L    8*N   N = rows*cols*dim IEEE-754 binary64 values, row-major
//                 (row, then col, then channel)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/error.hpp"
#include "loctok/rng.hpp"

namespace loctok {

struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t dim = 0;
  std::vector<double> data;

  TokenGrid() = default;
  TokenGrid(std::size_t r, std::size_t c, std::size_t d, double fill = 0.0)
      : rows(r), cols(c), dim(d), data(r * c * d, fill) {}

  std::size_t tokens() const { return rows * cols; }

  std::span<double> token(std::size_t r, std::size_t c) {
    return {data.data() + (r * cols + c) * dim, dim};
  }
  std::span<const double> token(std::size_t r, std::size_t c) const {
    return {data.data() + (r * cols + c) * dim, dim};
  }
  std::span<const double> token(std::size_t flat) const { return {data.data() + flat * dim, dim}; }

  double& at(std::size_t r, std::size_t c, std::size_t k) { return data[(r * cols + c) * dim + k]; }
  double at(std::size_t r, std::size_t c, std::size_t k) const {
    return data[(r * cols + c) * dim + k];
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// Flat token sequence: count x width.
struct TokenMatrix {
  std::size_t count = 0;
  std::size_t width = 0;
  std::vector<double> data;

  TokenMatrix() = default;
  TokenMatrix(std::size_t n, std::size_t w) : count(n), width(w), data(n * w, 0.0) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * width, width}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * width, width}; }

  friend bool operator==(const TokenMatrix&, const TokenMatrix&) = default;
};

inline TokenMatrix flatten(const TokenGrid& g) {
  TokenMatrix m;
  m.count = g.tokens();
  m.width = g.dim;
  m.data = g.data;
  return m;
}

struct ImageArray {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> data;  // H x W x C

  ImageArray() = default;
  ImageArray(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * channels + c];
  }
};

namespace detail {

inline constexpr std::array<char, 8> kGridMagic = {'L', 'T', 'K', 'G', 'R', 'I', 'D', '\0'};
inline constexpr std::uint32_t kGridVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(Errc::parse_error, "grid container truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_grid(const TokenGrid& g, std::string_view generator = kGeneratorId) {
  std::string out(detail::kGridMagic.begin(), detail::kGridMagic.end());
  detail::put_u32(out, detail::kGridVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(generator.size()));
  out.append(generator);
  detail::put_u64(out, g.rows);
  detail::put_u64(out, g.cols);
  detail::put_u64(out, g.dim);
  out.reserve(out.size() + g.data.size() * 8);
  for (double v : g.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

struct DecodedGrid {
  TokenGrid grid;
  std::string generator;
};

inline DecodedGrid decode_grid(std::string_view bytes) {
  detail::ByteReader in(bytes);
  auto magic = in.take(8);
  if (std::memcmp(magic.data(), detail::kGridMagic.data(), 8) != 0) {
    throw Error(Errc::parse_error, "not a grid container (bad magic)");
  }
  if (in.uint(4) != detail::kGridVersion) throw Error(Errc::parse_error, "unsupported grid version");
  DecodedGrid out;
  const auto glen = in.uint(4);
  out.generator = std::string(in.take(glen));
  const auto rows = in.uint(8);
  const auto cols = in.uint(8);
  const auto dim = in.uint(8);
  if (dim != 0 && rows != 0 && cols > in.remaining() / 8 / dim / rows) {
    throw Error(Errc::parse_error, "grid container truncated");
  }
  out.grid = TokenGrid(rows, cols, dim);
  for (double& v : out.grid.data) v = std::bit_cast<double>(in.uint(8));
  if (!in.done()) throw Error(Errc::parse_error, "trailing bytes after grid payload");
  return out;
}

inline nlohmann::json grid_to_json(const TokenGrid& g, std::string_view generator = kGeneratorId) {
  return {{"generator", generator}, {"rows", g.rows}, {"cols", g.cols}, {"dim", g.dim},
          {"data", g.data}};
}

inline TokenGrid grid_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    const auto dim = j.at("dim").get<std::size_t>();
    auto data = j.at("data").get<std::vector<double>>();
    if (rows * cols * dim != data.size() || (rows != 0 && cols != 0 && dim != 0 && data.size() / rows / cols != dim)) {
      throw Error(Errc::parse_error, "grid data length mismatch");
    }
    TokenGrid g;
    g.rows = rows;
    g.cols = cols;
    g.dim = dim;
    g.data = std::move(data);
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("grid json: ") + e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io_error, "short write to " + path);
}

}  // namespace loctok
