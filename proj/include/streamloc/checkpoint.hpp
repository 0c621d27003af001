#pragma once

#include <string>
#include <vector>

#include "streamloc/optim.hpp"

namespace streamloc {

// Checkpoint file layout: magic "SLCK", u16 version, 32-byte SHA-256 of the
// canonical config string, then one record per parameter:
//   u32 name length, name bytes, u8 dtype tag, u32 rank, u64 dims, raw
//   little-endian scalars.
// Loads are all-or-nothing: any mismatch or truncation leaves `params`
// untouched.

inline constexpr uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::string& config_str,
                     const std::vector<Parameter*>& params);

// Copies stored values into the existing parameter tensors (names, shapes
// and dtypes must match the file exactly, in any order).
void load_checkpoint(const std::string& path, const std::string& config_str,
                     const std::vector<Parameter*>& params);

// SHA-256 hex of a checkpoint's parameter bytes; detects silent mutation.
std::string checkpoint_params_hash(const std::vector<Parameter*>& params);

}  // namespace streamloc
