#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>

#include "gsbi/error.hpp"

namespace gsbi::io {

// Little-endian fixed-width serialization helpers shared by the grid,
// network and dataset formats.

template <typename T>
T byteswap_if_needed(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void write(std::ostream& os, T v) {
  v = byteswap_if_needed(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  if (!os) fail(ErrorKind::Io, "write failed");
}

template <typename T>
T read(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorKind::Io, "unexpected end of file");
  return byteswap_if_needed(v);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!os) fail(ErrorKind::Io, "write failed");
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!is || got != magic) {
    fail(ErrorKind::Schema, "bad magic: expected " + std::string(magic));
  }
}

}  // namespace gsbi::io
