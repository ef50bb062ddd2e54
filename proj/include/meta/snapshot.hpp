#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include "meta/binio.hpp"
#include "meta/tensor.hpp"

// Flat named-tensor container ("METAW1"):
//   magic[6] version:u32 count:u32
//   per entry: name_len:u16 name rank:u8 dims:u32*rank payload:f64*numel

namespace meta {

inline constexpr std::string_view kSnapshotMagic = "METAW1";
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;

  bool operator==(const NamedTensor& o) const { return name == o.name && tensor.shape == o.tensor.shape && tensor.data == o.tensor.data; }
};

using Snapshot = std::vector<NamedTensor>;

inline const Tensor* find_tensor(const Snapshot& snap, const std::string& name) {
  for (const auto& e : snap)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

inline const Tensor& get_tensor(const Snapshot& snap, const std::string& name) {
  const Tensor* t = find_tensor(snap, name);
  require(t != nullptr, ErrorKind::data, "snapshot has no entry named '" + name + "'");
  return *t;
}

inline binio::Writer encode_snapshot(const Snapshot& snap) {
  binio::Writer w;
  w.bytes(kSnapshotMagic);
  w.u32(kSnapshotVersion);
  w.u32(static_cast<std::uint32_t>(snap.size()));
  std::unordered_set<std::string> seen;
  for (const auto& e : snap) {
    require(seen.insert(e.name).second, ErrorKind::invalid_argument, "duplicate snapshot entry '" + e.name + "'");
    require(e.name.size() <= std::numeric_limits<std::uint16_t>::max(), ErrorKind::invalid_argument, "entry name too long");
    require(e.tensor.rank() <= 255, ErrorKind::invalid_argument, "tensor rank too large for '" + e.name + "'");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.u8(static_cast<std::uint8_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : e.tensor.data) w.f64(v);
  }
  return w;
}

inline Snapshot decode_snapshot(binio::Reader& r) {
  if (r.bytes(kSnapshotMagic.size()) != kSnapshotMagic) r.fail_here("bad magic (expected METAW1)");
  const std::uint32_t version = r.u32();
  if (version != kSnapshotVersion) r.fail_here("unsupported container version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  Snapshot snap;
  snap.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.bytes(r.u16());
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) r.fail_here("zero dimension in entry '" + e.name + "'");
    }
    const std::size_t n = numel(shape);
    if (r.remaining() / 8 < n) r.fail_here("truncated payload for entry '" + e.name + "'");
    std::vector<double> data(n);
    for (double& v : data) v = r.f64();
    e.tensor = Tensor(std::move(shape), std::move(data));
    snap.push_back(std::move(e));
  }
  if (!r.at_end()) r.fail_here("trailing bytes after last entry");
  return snap;
}

inline void save_snapshot(const Snapshot& snap, const std::string& path) { encode_snapshot(snap).write_file(path); }

inline Snapshot load_snapshot(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return decode_snapshot(r);
}

}  // namespace meta
