#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vtlm {

enum class FormatErrorKind {
  bad_magic,
  bad_version,
  truncated,
  malformed,
  shape_mismatch,
};

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Little-endian primitives. The project only targets little-endian hosts;
// a static check at build time keeps the assumption honest.
static_assert(std::endian::native == std::endian::little, "file formats are little-endian");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void f32s(const float* v, size_t n) { raw(v, n * 4); }
  void bytes(const void* p, size_t n) { raw(p, n); }
  void magic(const char tag[4]) { raw(tag, 4); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

 private:
  void raw(const void* p, size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  std::ostream& os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(is) {}
  uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
  uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
  uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
  float f32() { float v; raw(&v, 4); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  void f32s(float* v, size_t n) { raw(v, n * 4); }
  void expect_magic(const char tag[4], const std::string& what) {
    char got[4];
    raw(got, 4);
    if (std::memcmp(got, tag, 4) != 0) throw FormatError(FormatErrorKind::bad_magic, "bad magic in " + what);
  }
  std::string str() {
    uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

 private:
  void raw(void* p, size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is_.gcount()) != n)
      throw FormatError(FormatErrorKind::truncated, "unexpected EOF");
  }
  std::istream& is_;
};

}  // namespace vtlm
