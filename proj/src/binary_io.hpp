// Little-endian raw value I/O shared by the volume and checkpoint formats.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <type_traits>
#include <vector>

namespace firework::detail {

template <typename T>
void write_le(std::ostream& os, const T* values, std::size_t count) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::vector<char> buf(count * sizeof(T));
  std::memcpy(buf.data(), values, buf.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) std::reverse(buf.begin() + i * sizeof(T), buf.begin() + (i + 1) * sizeof(T));
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
void write_le(std::ostream& os, T value) {
  write_le(os, &value, 1);
}

template <typename T>
void read_le(std::istream& is, T* values, std::size_t count) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::vector<char> buf(count * sizeof(T));
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw std::runtime_error("unexpected end of binary data");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) std::reverse(buf.begin() + i * sizeof(T), buf.begin() + (i + 1) * sizeof(T));
  }
  std::memcpy(values, buf.data(), buf.size());
}

template <typename T>
T read_le(std::istream& is) {
  T value;
  read_le(is, &value, 1);
  return value;
}

}  // namespace firework::detail
