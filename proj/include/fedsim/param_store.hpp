#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/half.hpp"
#include "fedsim/wire.hpp"

namespace fedsim {

// Named tensors with a parameter-group tag driving per-group learning rates
// and weight decay. Values live as double in memory; the wire format narrows
// to IEEE 754 binary16.

enum class ParamGroup : uint8_t { kBias = 0, kNorm = 1, kDecay = 2 };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBias: return "bias";
    case ParamGroup::kNorm: return "norm";
    case ParamGroup::kDecay: return "decay";
  }
  return "?";
}

struct ParamEntry {
  std::string name;
  ParamGroup group = ParamGroup::kDecay;
  std::vector<uint32_t> shape;
  std::vector<double> values;

  size_t element_count() const {
    size_t n = 1;
    for (uint32_t d : shape) n *= d;
    return n;
  }
};

class ParameterSet {
 public:
  ParameterSet() = default;

  explicit ParameterSet(std::vector<ParamEntry> entries) : entries_(std::move(entries)) {
    std::unordered_set<std::string_view> seen;
    for (const auto& e : entries_) {
      if (!seen.insert(e.name).second) {
        throw MalformedPayload("duplicate parameter name: " + e.name);
      }
      if (e.element_count() != e.values.size()) {
        throw ShapeMismatch("entry '" + e.name + "': shape holds " +
                            std::to_string(e.element_count()) + " elements but " +
                            std::to_string(e.values.size()) + " values given");
      }
    }
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  size_t total_elements() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.values.size();
    return n;
  }

  const ParamEntry* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  ParamEntry* find(std::string_view name) {
    for (auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

 private:
  std::vector<ParamEntry> entries_;
};

// Requires identical entry names and shapes, in order.
inline void require_same_structure(const ParameterSet& a, const ParameterSet& b,
                                   const char* what) {
  if (a.size() != b.size()) {
    throw ShapeMismatch(std::string(what) + ": " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + " entries");
  }
  for (size_t i = 0; i < a.size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name || ea.shape != eb.shape) {
      throw ShapeMismatch(std::string(what) + ": entry " + std::to_string(i) + " is '" +
                          ea.name + "' vs '" + eb.name + "' or shapes differ");
    }
  }
}

// dst + a * src, elementwise over matching entries.
inline ParameterSet axpy(const ParameterSet& dst, double a, const ParameterSet& src) {
  require_same_structure(dst, src, "axpy");
  std::vector<ParamEntry> out = dst.entries();
  for (size_t i = 0; i < out.size(); ++i) {
    const auto& s = src.entries()[i].values;
    auto& d = out[i].values;
    for (size_t j = 0; j < d.size(); ++j) d[j] += a * s[j];
  }
  return ParameterSet(std::move(out));
}

inline ParameterSet zeros_like(const ParameterSet& p) {
  std::vector<ParamEntry> out = p.entries();
  for (auto& e : out) std::fill(e.values.begin(), e.values.end(), 0.0);
  return ParameterSet(std::move(out));
}

// ---- binary16 wire format ----
//
//   magic "FS16" | version u8 | entry_count u32 | saturation_count u64
//   per entry: name_len u32 | name | group u8 | rank u32 | dims u32[rank]
//              | values as binary16, little endian
//
// The saturation counter in the header records how many values were clamped
// to +-65504 during encoding.

inline constexpr uint8_t kParamFormatVersion = 1;
inline constexpr size_t kParamHeaderSize = 4 + 1 + 4 + 8;

inline size_t encoded_size(const ParameterSet& p) {
  size_t n = kParamHeaderSize;
  for (const auto& e : p.entries()) {
    n += 4 + e.name.size() + 1 + 4 + 4 * e.shape.size() + 2 * e.values.size();
  }
  return n;
}

namespace detail {

inline void write_param_payload(ByteWriter& w, const ParameterSet& p) {
  w.put_u8('F');
  w.put_u8('S');
  w.put_u8('1');
  w.put_u8('6');
  w.put_u8(kParamFormatVersion);
  w.put_u32(static_cast<uint32_t>(p.size()));
  const size_t sat_offset = w.size();
  w.put_u64(0);
  uint64_t saturated = 0;
  for (const auto& e : p.entries()) {
    w.put_string(e.name);
    w.put_u8(static_cast<uint8_t>(e.group));
    w.put_u32(static_cast<uint32_t>(e.shape.size()));
    for (uint32_t d : e.shape) w.put_u32(d);
    for (size_t j = 0; j < e.values.size(); ++j) {
      const double v = e.values[j];
      if (!std::isfinite(v)) {
        throw NonFiniteValue("entry '" + e.name + "' value " + std::to_string(j) +
                             " is not finite");
      }
      bool sat = false;
      w.put_u16(half_from_double(v, &sat));
      if (sat) ++saturated;
    }
  }
  w.patch_u64(sat_offset, saturated);
}

inline ParameterSet read_param_payload(ByteReader& r, uint64_t* saturation_count) {
  const uint8_t m0 = r.get_u8(), m1 = r.get_u8(), m2 = r.get_u8(), m3 = r.get_u8();
  if (m0 != 'F' || m1 != 'S' || m2 != '1' || m3 != '6') {
    throw BadMagic("parameter payload does not start with FS16");
  }
  const uint8_t version = r.get_u8();
  if (version != kParamFormatVersion) {
    throw UnknownVersion("parameter payload version " + std::to_string(version) +
                         ", expected " + std::to_string(kParamFormatVersion));
  }
  const uint32_t count = r.get_u32();
  const uint64_t sat = r.get_u64();
  if (saturation_count) *saturation_count = sat;
  // Every entry occupies at least 9 bytes (name length, group, rank), so a
  // count beyond that bound cannot be satisfied by the remaining payload.
  if (count > r.remaining() / 9) {
    throw TruncatedPayload("payload claims " + std::to_string(count) +
                           " entries but only " + std::to_string(r.remaining()) +
                           " bytes remain");
  }
  std::vector<ParamEntry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    ParamEntry e;
    e.name = r.get_string();
    const uint8_t g = r.get_u8();
    if (g > 2) {
      throw MalformedPayload("entry '" + e.name + "': unknown parameter group " +
                             std::to_string(g));
    }
    e.group = static_cast<ParamGroup>(g);
    const uint32_t rank = r.get_u32();
    if (rank > 32) {
      throw MalformedPayload("entry '" + e.name + "': implausible rank " +
                             std::to_string(rank));
    }
    e.shape.resize(rank);
    uint64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      e.shape[d] = r.get_u32();
      n *= e.shape[d];
      if (n > (uint64_t{1} << 40)) {
        throw MalformedPayload("entry '" + e.name + "': element count overflows");
      }
    }
    if (n > r.remaining() / 2) {
      throw TruncatedPayload("entry '" + e.name + "' claims " + std::to_string(n) +
                             " values but only " + std::to_string(r.remaining()) +
                             " bytes remain");
    }
    e.values.resize(n);
    for (uint64_t j = 0; j < n; ++j) e.values[j] = half_to_double(r.get_u16());
    entries.push_back(std::move(e));
  }
  return ParameterSet(std::move(entries));
}

}  // namespace detail

inline std::vector<uint8_t> encode_fp16(const ParameterSet& p) {
  ByteWriter w;
  w.reserve(encoded_size(p));
  detail::write_param_payload(w, p);
  return w.take();
}

// Reads the saturation counter out of an encoded payload header.
inline uint64_t payload_saturation_count(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.get_bytes(4 + 1 + 4);
  return r.get_u64();
}

inline ParameterSet decode_fp16(std::span<const uint8_t> bytes,
                                uint64_t* saturation_count = nullptr) {
  ByteReader r(bytes);
  ParameterSet p = detail::read_param_payload(r, saturation_count);
  if (!r.at_end()) {
    throw MalformedPayload("parameter payload has " + std::to_string(r.remaining()) +
                           " trailing bytes");
  }
  return p;
}

// ---- checkpoints ----
//
// A checkpoint is a parameter payload followed by a metadata block:
//   "META" | count u32 | per pair: key string | value string
// Keys are sorted, so encoding is deterministic.

struct Checkpoint {
  ParameterSet params;
  std::map<std::string, std::string> meta;
};

inline void validate_checkpoint_meta(const std::map<std::string, std::string>& meta) {
  auto it = meta.find("round");
  if (it == meta.end()) return;
  const std::string& s = it->second;
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw MalformedPayload("checkpoint meta 'round' is not a non-negative integer: '" + s +
                           "'");
  }
}

inline std::vector<uint8_t> encode_checkpoint(const Checkpoint& ck) {
  validate_checkpoint_meta(ck.meta);
  ByteWriter w;
  w.reserve(encoded_size(ck.params) + 64);
  detail::write_param_payload(w, ck.params);
  w.put_u8('M');
  w.put_u8('E');
  w.put_u8('T');
  w.put_u8('A');
  w.put_u32(static_cast<uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    w.put_string(k);
    w.put_string(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  Checkpoint ck;
  ck.params = detail::read_param_payload(r, nullptr);
  const uint8_t m0 = r.get_u8(), m1 = r.get_u8(), m2 = r.get_u8(), m3 = r.get_u8();
  if (m0 != 'M' || m1 != 'E' || m2 != 'T' || m3 != 'A') {
    throw BadMagic("checkpoint meta block does not start with META");
  }
  const uint32_t count = r.get_u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string k = r.get_string();
    std::string v = r.get_string();
    ck.meta.emplace(std::move(k), std::move(v));
  }
  if (!r.at_end()) {
    throw MalformedPayload("checkpoint has " + std::to_string(r.remaining()) +
                           " trailing bytes");
  }
  validate_checkpoint_meta(ck.meta);
  return ck;
}

// A model broadcast is either a bare parameter payload or a full checkpoint.
struct ModelPayload {
  ParameterSet params;
  std::optional<std::map<std::string, std::string>> meta;
};

inline ModelPayload decode_model_payload(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  ModelPayload mp;
  mp.params = detail::read_param_payload(r, nullptr);
  if (r.at_end()) return mp;
  Checkpoint ck = decode_checkpoint(bytes);
  mp.meta = std::move(ck.meta);
  mp.params = std::move(ck.params);
  return mp;
}

}  // namespace fedsim
