#pragma once

#include <string>
#include <vector>

#include "tdaf/nn/r2dns.hpp"

namespace tdaf {

/// Mutable view of one serialized tensor: model parameters plus the per-flow
/// norm statistics ("<layer>.running_mean.flow<k>" / ".running_var.flow<k>").
struct StateEntry {
  std::string name;
  Shape dims{1, 1, 1, 1};
  float* data = nullptr;
};

std::vector<StateEntry> model_state_entries(R2dnsModel<float>& model);

/// File layout (little endian):
///   8-byte magic "TDAFCKPT"
///   u32 version (currently 1)
///   u32 entry count
///   per entry: u32 name length, name bytes, 4 x u32 dims, f32 values
///   u64 FNV-1a checksum over everything between the version field and the
///   checksum itself
/// save -> load -> save is byte-identical.
void save_checkpoint(const std::string& path, const std::vector<StateEntry>& entries);

/// Loads into the given views. The checkpoint must contain exactly the same
/// entry set with identical dims; the error names the first mismatch.
void load_checkpoint(const std::string& path, const std::vector<StateEntry>& entries);

struct CheckpointEntry {
  std::string name;
  Shape dims{1, 1, 1, 1};
  std::vector<float> values;
};

std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

}  // namespace tdaf
