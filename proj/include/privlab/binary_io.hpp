#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "privlab/error.hpp"

namespace privlab::io {

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
void write_be(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

/// Reads fixed-width values and tracks the byte offset for error messages.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T le(const char* what) {
    unsigned char bytes[sizeof(T)];
    raw(bytes, sizeof(T), what);
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  template <typename T>
  T be(const char* what) {
    unsigned char bytes[sizeof(T)];
    raw(bytes, sizeof(T), what);
    if constexpr (std::endian::native == std::endian::little) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  void raw(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(std::string("truncated input while reading ") + what,
                        offset_ + static_cast<std::size_t>(in_.gcount()));
    }
    offset_ += n;
  }

  void expect_magic(const char (&magic)[5]) {
    const std::size_t at = offset_;
    char got[4];
    raw(got, 4, "magic");
    if (std::memcmp(got, magic, 4) != 0) {
      throw FormatError(std::string("bad magic, expected ") + magic, at);
    }
  }

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

}  // namespace privlab::io
