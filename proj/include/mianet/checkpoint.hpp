#pragma once

#include <array>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mianet/autodiff.hpp"
#include "mianet/tensor_io.hpp"

namespace mianet {

inline constexpr std::array<char, 4> miac_magic{'M', 'I', 'A', 'C'};

struct named_tensor {
  std::string name;
  tensor value;
};

/// MIAC: "MIAC", u32 count, then per entry u16 name length, UTF-8 name, MIAT tensor.
inline void write_checkpoint(std::ostream& os, std::span<const ad::parameter* const> params) {
  os.write(miac_magic.data(), 4);
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    if (p->name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long: " + p->name);
    detail::put_u16(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_miat(os, p->value);
  }
}

inline std::vector<named_tensor> read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != miac_magic) throw format_error("not a MIAC checkpoint (bad magic)");
  const std::uint32_t count = detail::get_u32(is);
  std::vector<named_tensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = detail::get_u16(is);
    std::string name(len, '\0');
    if (len && !is.read(name.data(), len)) throw format_error("truncated parameter name");
    out.push_back({std::move(name), read_miat(is)});
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& p, std::span<const ad::parameter* const> params) {
  auto f = detail::open_out(p);
  write_checkpoint(f, params);
}

/// Loads values into `params` by name. Every parameter must be present with a
/// matching shape; mismatches are reported together.
inline void load_checkpoint(const std::filesystem::path& p, std::span<ad::parameter* const> params) {
  auto f = detail::open_in(p);
  const auto entries = read_checkpoint(f);
  std::string problems;
  for (auto* param : params) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const named_tensor& e) { return e.name == param->name; });
    if (it == entries.end()) {
      problems += " missing " + param->name + ";";
    } else if (it->value.shape() != param->value.shape()) {
      problems += " " + param->name + " expected " + shape_string(param->value.shape()) + " got " +
                  shape_string(it->value.shape()) + ";";
    }
  }
  if (entries.size() != params.size()) {
    problems += " checkpoint has " + std::to_string(entries.size()) + " tensors, model has " +
                std::to_string(params.size()) + ";";
  }
  if (!problems.empty()) throw format_error("checkpoint/config shape mismatch:" + problems);
  for (auto* param : params) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const named_tensor& e) { return e.name == param->name; });
    param->value = it->value;
    param->zero_grad();
  }
}

}  // namespace mianet
