#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "sif/error.hpp"

namespace sif::io {

// Little-endian primitive writer over an ostream.
class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <typename T>
  void put(T v) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(v);
    char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    os_.write(buf, sizeof(T));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_f64(double d) { put(std::bit_cast<std::uint64_t>(d)); }
  void put_magic(std::string_view magic) { os_.write(magic.data(), static_cast<std::streamsize>(magic.size())); }
  void put_bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void put_string(std::string_view s) {
    put(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  bool ok() const { return static_cast<bool>(os_); }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  template <typename T>
  T get() {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    read(buf, sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
    return static_cast<T>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  void expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    read(got.data(), got.size());
    if (got != magic) throw FormatError(what_ + ": bad magic '" + got + "', expected '" + std::string(magic) + "'");
  }
  std::string get_string() {
    const auto n = get<std::uint16_t>();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError(what_ + ": truncated file");
  }

 private:
  std::istream& is_;
  std::string what_;
};

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sif::io
