#include "amalgam/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <set>

#include "amalgam/errors.hpp"
#include "amalgam/file_io.hpp"

namespace amalgam {

namespace {

constexpr unsigned char kMagic[4] = {'A', 'M', 'L', 'G'};

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<unsigned char>& out, double v) {
  put_u64(out, std::bit_cast<uint64_t>(v));
}

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  size_t offset() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }

  void need(size_t n, const std::string& what) const {
    if (n > remaining())
      throw IoError("checkpoint truncated: " + what + " needs " + std::to_string(n) +
                    " bytes at offset " + std::to_string(pos_) + " but only " +
                    std::to_string(remaining()) + " remain");
  }

  uint32_t u32(const std::string& what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64(const std::string& what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  double f64(const std::string& what) { return std::bit_cast<double>(u64(what)); }

  std::string str(size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<unsigned char>& bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::set<std::string> seen;
  for (const auto& e : entries)
    if (!seen.insert(e.name).second)
      throw IoError("checkpoint: duplicate entry name '" + e.name + "'");

  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    const Shape& shape = e.tensor.shape();
    put_u32(out, static_cast<uint32_t>(shape.size()));
    for (int64_t d : shape) put_u64(out, static_cast<uint64_t>(d));
    const double* data = e.tensor.data();
    for (int64_t i = 0; i < e.tensor.size(); ++i) put_f64(out, data[i]);
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw IoError("not a checkpoint: the file does not start with the AMLG magic");
  ByteReader r(bytes);
  (void)r.str(4, "magic");
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  const uint32_t count = r.u32("entry count");

  std::vector<CheckpointEntry> entries;
  // The count is untrusted: never allocate more slots than the remaining
  // bytes could possibly describe (each entry needs >= 8 header bytes).
  entries.reserve(static_cast<size_t>(
      std::min<uint64_t>(count, r.remaining() / 8)));
  std::set<std::string> seen;
  for (uint32_t idx = 0; idx < count; ++idx) {
    const std::string tag = "entry " + std::to_string(idx);
    const uint32_t name_len = r.u32(tag + " name length");
    const std::string name = r.str(name_len, tag + " name");
    if (!seen.insert(name).second)
      throw IoError("checkpoint: duplicate entry name '" + name + "'");
    const uint32_t rank = r.u32("'" + name + "' rank");
    if (rank > r.remaining() / 8)
      throw IoError("checkpoint entry '" + name + "': rank " + std::to_string(rank) + " needs " +
                    std::to_string(rank) + " * 8 dimension bytes but only " +
                    std::to_string(r.remaining()) + " remain");
    Shape shape;
    shape.reserve(rank);
    uint64_t elems = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint64_t dim = r.u64("'" + name + "' dimension " + std::to_string(d));
      if (dim == 0)
        throw IoError("checkpoint entry '" + name + "': dimension " + std::to_string(d) +
                      " is zero (a zero-byte payload is never written)");
      if (elems > UINT64_MAX / dim)
        throw IoError("checkpoint entry '" + name + "': element count overflows with only " +
                      std::to_string(r.remaining()) + " bytes remaining");
      elems *= dim;
      shape.push_back(static_cast<int64_t>(dim));
    }
    if (elems > r.remaining() / 8)
      throw IoError("checkpoint entry '" + name + "': payload of " + std::to_string(elems) +
                    " values needs " + std::to_string(elems) + " * 8 bytes but only " +
                    std::to_string(r.remaining()) + " remain");
    std::vector<double> values;
    values.reserve(elems);
    for (uint64_t i = 0; i < elems; ++i) values.push_back(r.f64("'" + name + "' payload"));
    entries.push_back(CheckpointEntry{name, Tensor(std::move(shape), std::move(values))});
  }
  if (r.remaining() != 0)
    throw IoError("checkpoint has " + std::to_string(r.remaining()) +
                  " trailing bytes after the declared entries");
  return entries;
}

void save_checkpoint(const std::vector<CheckpointEntry>& entries, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_binary_file(path));
}

}  // namespace amalgam
