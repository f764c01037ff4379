#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lcap/params.hpp"
#include "lcap/tensor.hpp"

namespace lcap {

// Checkpoint layout: magic "LCAP1\n", then per parameter (sorted by name):
//   u32 name length | name bytes | u32 rank | u32 dims... | f64 data...
// all integers and floats little-endian.
namespace checkpoint_detail {

inline constexpr char kMagic[] = {'L', 'C', 'A', 'P', '1', '\n'};

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated integer field");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("checkpoint: truncated float field");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace checkpoint_detail

inline void save_checkpoint(const ParameterStore& params, const std::string& path) {
  namespace cd = checkpoint_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os.write(cd::kMagic, sizeof(cd::kMagic));

  std::vector<const Parameter*> sorted;
  sorted.reserve(params.size());
  for (const auto& p : params.all()) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(),
            [](const Parameter* a, const Parameter* b) { return a->name < b->name; });

  for (const Parameter* p : sorted) {
    cd::put_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    const auto& shape = p->tensor.shape();
    cd::put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) cd::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p->tensor.data()) cd::put_f64(os, v);
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

// Loads values into an already-constructed store; every record must match an
// existing parameter, and every parameter must be present.
inline void load_checkpoint(ParameterStore& params, const std::string& path) {
  namespace cd = checkpoint_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[sizeof(cd::kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, cd::kMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  std::size_t loaded = 0;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const std::uint32_t name_len = cd::get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("checkpoint: truncated name");
    const std::uint32_t rank = cd::get_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(cd::get_u32(is));
    const std::int64_t n = shape_numel(shape);
    if (!params.contains(name)) {
      throw IoError("checkpoint: unknown parameter in file: " + name);
    }
    Parameter& p = params.get(name);
    if (p.tensor.shape() != shape) {
      throw IoError("checkpoint: shape mismatch for " + name + ": file " +
                    shape_to_string(shape) + " vs model " + shape_to_string(p.tensor.shape()));
    }
    auto& dst = p.tensor.data();
    for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] = cd::get_f64(is);
    ++loaded;
  }
  if (loaded != params.size()) {
    throw IoError("checkpoint: file has " + std::to_string(loaded) + " parameters, model expects " +
                  std::to_string(params.size()));
  }
}

}  // namespace lcap
