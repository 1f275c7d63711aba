#pragma once

// Little-endian byte packing shared by the FPSC/FPPR/FPPL/FPCK containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "fpeft/tensor.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void magic(const char (&m)[5]) { bytes(m, 4); }

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t>& data() { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  template <class U>
  void le(U v) {
    std::uint8_t b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    bytes(b, sizeof(U));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n, std::string what) : p_(p), n_(n), what_(std::move(what)) {}
  explicit ByteReader(const std::vector<std::uint8_t>& v, std::string what) : ByteReader(v.data(), v.size(), std::move(what)) {}

  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(le<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char (&m)[5]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, m, 4) != 0) throw DataError(what_ + ": bad magic, expected \"" + std::string(m, 4) + "\"");
  }
  ByteReader sub(std::size_t n) {
    need(n);
    ByteReader r(p_ + pos_, n, what_);
    pos_ += n;
    return r;
  }
  std::size_t remaining() const { return n_ - pos_; }
  bool done() const { return pos_ == n_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n_ - pos_ < n) throw DataError(what_ + ": truncated data");
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& data);

// Tensor payload: u32 rank, u32 extents..., f32 values.
void write_tensor(ByteWriter& w, const Tensor& t);
Tensor read_tensor(ByteReader& r);

}  // namespace fpeft
