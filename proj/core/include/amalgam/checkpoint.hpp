#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

/// One named tensor inside a checkpoint. Entry order is preserved by the
/// round trip; names must be unique within a file.
struct CheckpointEntry {
  std::string name;
  Tensor tensor;
};

inline constexpr uint32_t kCheckpointVersion = 1;

/// Binary layout (all integers little-endian regardless of host):
///   bytes 0..3   magic "AMLG"
///   u32          format version (currently 1)
///   u32          entry count
///   per entry:
///     u32        name byte length, then that many UTF-8 bytes
///     u32        rank
///     rank * u64 dims
///     prod(dims) * f64  row-major values, IEEE-754 bit patterns
/// No padding, no trailing bytes. There is no checksum: flipped payload
/// bytes decode to different values, while any structural corruption is
/// caught by the byte accounting below.
std::vector<unsigned char> encode_checkpoint(const std::vector<CheckpointEntry>& entries);

/// Strict decoder. Throws IoError on: wrong magic ("not a checkpoint"),
/// version other than kCheckpointVersion, any field extending past the end
/// of the buffer (reported with the byte counts involved), zero dims,
/// duplicate names, or bytes left over after the declared entries.
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<unsigned char>& bytes);

/// encode + atomic write / read + decode.
void save_checkpoint(const std::vector<CheckpointEntry>& entries, const std::string& path);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

}  // namespace amalgam
