#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"

namespace fedsim {

// Little-endian byte stream helpers shared by every wire format in the
// project. All multi-byte integers on the wire are little endian.

class ByteWriter {
 public:
  void put_u8(uint8_t v) { buf_.push_back(v); }

  void put_u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
  }

  void put_u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }

  void put_u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }

  void put_f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(bits);
  }

  void put_bytes(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  void put_string(std::string_view s) {
    put_u32(static_cast<uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  // Overwrite a u64 previously written at `offset` (for counters known late).
  void patch_u64(size_t offset, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[offset + i] = static_cast<uint8_t>(v >> (8 * i));
  }

  size_t size() const { return buf_.size(); }
  void reserve(size_t n) { buf_.reserve(n); }
  std::vector<uint8_t> take() { return std::move(buf_); }
  const std::vector<uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t get_u8() {
    need(1);
    return data_[pos_++];
  }

  uint16_t get_u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  uint32_t get_u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t get_u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  double get_f64() {
    const uint64_t bits = get_u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::span<const uint8_t> get_bytes(size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::string get_string() {
    const uint32_t n = get_u32();
    auto b = get_bytes(n);
    return std::string(reinterpret_cast<const char*>(b.data()), b.size());
  }

  size_t remaining() const { return data_.size() - pos_; }
  size_t position() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) const {
    if (data_.size() - pos_ < n) {
      throw TruncatedPayload("payload ends at byte " + std::to_string(data_.size()) +
                             ", needed " + std::to_string(n) + " more at offset " +
                             std::to_string(pos_));
    }
  }

  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

}  // namespace fedsim
