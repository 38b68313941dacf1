#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "mianet/tensor.hpp"

namespace mianet {

class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw format_error("unexpected end of stream");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw format_error("unexpected end of stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  return f;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

}  // namespace detail

inline constexpr std::array<char, 4> miat_magic{'M', 'I', 'A', 'T'};

/// MIAT: "MIAT", u32 rank, rank x u32 dims, then float32 payload, all little-endian.
inline void write_miat(std::ostream& os, const tensor& t) {
  os.write(miat_magic.data(), 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline tensor read_miat(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != miat_magic) throw format_error("not a MIAT tensor (bad magic)");
  const std::uint32_t rank = detail::get_u32(is);
  if (rank < 1 || rank > 4) throw format_error("MIAT rank out of range: " + std::to_string(rank));
  tensor::shape_type shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = detail::get_u32(is);
    if (d == 0) throw format_error("MIAT has a zero dimension");
    n *= d;
  }
  std::vector<double> data(n);
  for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(detail::get_u32(is)));
  return tensor(std::move(shape), std::move(data));
}

inline void save_miat(const std::filesystem::path& p, const tensor& t) {
  auto f = detail::open_out(p);
  write_miat(f, t);
}

inline tensor load_miat(const std::filesystem::path& p) {
  auto f = detail::open_in(p);
  return read_miat(f);
}

/// Rounds every value to the nearest float, i.e. what a MIAT round-trip preserves.
inline tensor quantize_to_float(tensor t) {
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

// PGM (binary P5, maxval 255).

inline void write_pgm(std::ostream& os, std::size_t height, std::size_t width, std::span<const std::uint8_t> pixels) {
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

/// [h,w] map with values in [0,1], scaled by 255 and rounded.
inline void save_pgm(const std::filesystem::path& p, const tensor& map) {
  if (map.rank() != 2) throw std::invalid_argument("save_pgm: expected a [h,w] map");
  std::vector<std::uint8_t> px(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map[i], 0.0, 1.0) * 255.0));
  }
  auto f = detail::open_out(p);
  write_pgm(f, map.dim(0), map.dim(1), px);
}

inline void save_pgm(const std::filesystem::path& p, const binary_mask& m) {
  std::vector<std::uint8_t> px(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) px[i] = m[i] ? 255 : 0;
  auto f = detail::open_out(p);
  write_pgm(f, m.height(), m.width(), px);
}

struct gray_image {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

inline gray_image read_pgm(std::istream& is) {
  auto token = [&is]() {
    std::string tok;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(ch);
    }
    if (tok.empty()) throw format_error("truncated PGM header");
    return tok;
  };
  if (token() != "P5") throw format_error("only binary PGM (P5) is supported");
  gray_image img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw format_error("PGM maxval must be 255");
  } catch (const std::logic_error&) {
    throw format_error("malformed PGM header");
  }
  img.pixels.resize(img.height * img.width);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw format_error("truncated PGM payload");
  }
  return img;
}

inline gray_image load_pgm(const std::filesystem::path& p) {
  auto f = detail::open_in(p);
  return read_pgm(f);
}

/// Pixels >= 128 become foreground.
inline binary_mask load_pgm_mask(const std::filesystem::path& p) {
  const auto img = load_pgm(p);
  std::vector<std::uint8_t> d(img.pixels.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = img.pixels[i] >= 128 ? 1 : 0;
  return binary_mask(img.height, img.width, std::move(d));
}

inline tensor load_pgm_map(const std::filesystem::path& p) {
  const auto img = load_pgm(p);
  tensor t({img.height, img.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = img.pixels[i] / 255.0;
  return t;
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
  auto f = detail::open_in(p);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace mianet
