#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hookrt::wire {

// Little-endian primitive IO for the HKRT / QKC1 / STV1 containers.

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void put_f32_block(std::ostream& os, const float* data, std::size_t n) {
  // assumes a little-endian host, which is all this project targets
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(std::string("truncated reading ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is, const char* what) {
  std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void get_f32_block(std::istream& is, float* data, std::size_t n, const char* what) {
  if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4)))
    throw FormatError(std::string("truncated reading ") + what);
}

inline std::string get_str(std::istream& is, const char* what) {
  std::uint32_t n = get_u32(is, what);
  if (n > (1u << 20)) throw FormatError(std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError(std::string("truncated reading ") + what);
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& path) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0)
    throw FormatError("bad magic in " + path + ", expected " + std::string(magic, 4));
}

}  // namespace hookrt::wire
