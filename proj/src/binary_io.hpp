#pragma once

// Little-endian readers/writers for the checkpoint formats.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "fpthd/common.hpp"

namespace fpthd::binio {

class Writer {
 public:
  void bytes(std::string_view s) { buf_.append(s); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw Error("string too long for checkpoint");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }
  const std::string& data() const { return buf_; }

 private:
  template <class U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get<std::uint32_t>()); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string str16() {
    const auto n = u16();
    return std::string(bytes(n));
  }
  bool done() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <class U>
  U get() {
    const auto s = bytes(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

/// Writes the entry table (name, shape) followed by all values as f32.
template <class Store>
void write_params(Writer& w, const Store& store) {
  w.u32(static_cast<std::uint32_t>(store.entries().size()));
  for (const auto& e : store.entries()) {
    w.str16(e.name);
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (int d : e.shape) w.u32(static_cast<std::uint32_t>(d));
  }
  w.u64(store.size());
  for (auto v : store.values()) w.f32(static_cast<float>(v));
}

/// Reads a table written by write_params and checks it matches `store`.
template <class Store>
void read_params(Reader& r, Store& store) {
  const auto n = r.u32();
  if (n != store.entries().size())
    throw Error("checkpoint layer table has " + std::to_string(n) + " entries, model expects " +
                std::to_string(store.entries().size()));
  for (const auto& e : store.entries()) {
    const auto name = r.str16();
    if (name != e.name) throw Error("checkpoint layer '" + name + "' where '" + e.name + "' was expected");
    const auto ndim = r.u8();
    if (ndim != e.shape.size()) throw Error("checkpoint rank mismatch for '" + name + "'");
    for (int d : e.shape)
      if (r.u32() != static_cast<std::uint32_t>(d)) throw Error("checkpoint shape mismatch for '" + name + "'");
  }
  if (r.u64() != store.size()) throw Error("checkpoint weight count mismatch");
  for (auto& v : store.values()) {
    v = r.f32();
    if (!std::isfinite(v)) throw Error("checkpoint contains non-finite weights");
  }
}

}  // namespace fpthd::binio
