#pragma once

#include <string>

#include "hpmi/model.hpp"

namespace hpmi {

// Fixed little-endian binary format, bitwise round trip:
//   magic "HPMI" | u16 version | config block | tensors in canonical order,
//   each as u32 rank, u64 dims, raw f64 payload.
inline constexpr uint16_t kCheckpointVersion = 1;

void save_checkpoint(const TransformerCheckpoint& ckpt, const std::string& path);

// Throws ParseError naming the byte offset on bad magic, version mismatch,
// truncation, or trailing bytes.
TransformerCheckpoint load_checkpoint(const std::string& path);

// Additionally requires the stored config to equal `expected`; throws
// ContractError listing the differing fields otherwise.
TransformerCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace hpmi
