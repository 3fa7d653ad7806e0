#pragma once

// FLC1 checkpoint container.
//
//   "FLC1"
//   u32 header byte count, then UTF-8 "key=value\n" lines
//   u32 record count
//   per record: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//               prod(dims) x f32 values
//
// All integers and floats are little-endian.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fuseloc/tensor.hpp"

namespace fuseloc {

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const ParameterStore& params, std::map<std::string, std::string> header);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Copies every record into the matching parameter. Missing or mis-shaped
/// records are errors.
void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& params);

/// 64-bit FNV-1a of the serialized parameters; equal hashes mean identical state.
std::uint64_t parameter_hash(const ParameterStore& params);

}  // namespace fuseloc
