#pragma once
// Binary model checkpoints and content hashes. Byte layout in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "zsq/detector.hpp"

namespace zsq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string kind = "teacher";  // teacher | student
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t epoch = 0;
  std::map<std::string, double> metrics;
};

struct Checkpoint {
  Detector model;
  CheckpointMeta meta;
};

// Serialization is canonical: equal models and metadata give equal bytes.
std::string serialize_checkpoint(const Detector& model, const CheckpointMeta& meta);
// Throws ParseError on a bad magic, unknown version, truncation, checksum
// mismatch or tensors that do not fit the declared architecture.
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin);

void save_checkpoint(const Detector& model, const CheckpointMeta& meta, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
// Hash git assigns to a blob with these contents.
std::string git_blob_hash(std::string_view bytes);
// Blob hash for a file; for a directory, the blob hash of its sorted
// "relative-path blob-hash" listing.
std::string content_hash(const std::filesystem::path& path);

}  // namespace zsq
