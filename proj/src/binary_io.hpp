#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "volt/error.hpp"

namespace volt::detail {

template <typename U>
using BitsOf = std::conditional_t<
    sizeof(U) == 8, std::uint64_t,
    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;

// Little-endian writer independent of host byte order.
class ByteWriter {
public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}
  template <typename U>
  void put(U v) {
    const auto bits = std::bit_cast<BitsOf<U>>(v);
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out_.write(buf, sizeof(U));
  }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }

private:
  std::ostream& out_;
};

class ByteReader {
public:
  ByteReader(std::istream& in, std::string context) : in_(in), context_(std::move(context)) {}
  template <typename U>
  U get(const char* what) {
    unsigned char buf[sizeof(U)];
    if (!in_.read(reinterpret_cast<char*>(buf), sizeof(U))) truncated(what);
    BitsOf<U> bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<BitsOf<U>>(static_cast<BitsOf<U>>(buf[i]) << (8 * i));
    return std::bit_cast<U>(bits);
  }
  void bytes(char* p, std::size_t n, const char* what) {
    if (!in_.read(p, static_cast<std::streamsize>(n))) truncated(what);
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
  [[noreturn]] void truncated(const char* what) {
    throw FormatError("truncated " + context_ + " while reading " + what);
  }
  std::istream& in_;
  std::string context_;
};

} // namespace volt::detail
