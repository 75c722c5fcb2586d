#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ccsi/common.hpp"

namespace ccsi {

// Little-endian binary writer/reader for the pack and checkpoint formats.
// Host is assumed little-endian (x86/ARM); fields are written byte-wise so the
// formats stay portable regardless.

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path)
      : os_(path, std::ios::binary), path_(path) {
    if (!os_) throw Error("cannot open for writing: " + path);
  }

  void u8(std::uint8_t v) { os_.put(char(v)); }
  void u32(std::uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                 char((v >> 24) & 0xff)};
    os_.write(b, 4);
  }
  void u64(std::uint64_t v) {
    u32(std::uint32_t(v & 0xffffffffull));
    u32(std::uint32_t(v >> 32));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), std::streamsize(n));
  }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void magic(const char m[8]) { os_.write(m, 8); }

  void close() {
    os_.flush();
    if (!os_) throw Error("write failed: " + path_);
    os_.close();
  }

 private:
  std::ofstream os_;
  std::string path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path)
      : is_(path, std::ios::binary), path_(path) {
    if (!is_) throw LoadError("cannot open: " + path);
  }

  std::uint8_t u8() {
    int c = is_.get();
    check();
    return std::uint8_t(c);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    is_.read(reinterpret_cast<char*>(b), 4);
    check();
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), std::streamsize(n));
    check();
  }
  std::string str() {
    std::uint32_t n = u32();
    if (n > (1u << 24)) throw LoadError("string length implausible in " + path_);
    std::string s(n, '\0');
    if (n) bytes(s.data(), n);
    return s;
  }
  void expect_magic(const char m[8], const std::string& what) {
    char got[8];
    is_.read(got, 8);
    check();
    if (std::memcmp(got, m, 8) != 0)
      throw LoadError("bad magic for " + what + " in " + path_);
  }
  bool at_eof() {
    is_.peek();
    return is_.eof();
  }

 private:
  void check() {
    if (!is_) throw LoadError("truncated or unreadable file: " + path_);
  }
  std::ifstream is_;
  std::string path_;
};

}  // namespace ccsi
