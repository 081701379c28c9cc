#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "crcnn/network.hpp"
#include "crcnn/ops.hpp"

namespace crcnn {

// On-disk layout: 8-byte magic "CRCNN\0\0\x01", u64 little-endian header
// length, UTF-8 JSON header (block table, blob table, metadata, optimizer
// hyperparameters), then raw little-endian float32 blobs in header order.
// Inspectable with a hex dump, bit-exact on round trip.

inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'C', 'N', 'N', '\0', '\0', '\x01'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  int epochs_run = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
  double dataset_mean = 0.0;
  double threshold = 0.8;
};

struct LoadedCheckpoint {
  NetworkSpec net;
  CheckpointMeta meta;
  std::optional<AdamState> optimizer;
};

/// Atomic: writes to a temp file in the same directory, then renames.
void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& net,
                     const CheckpointMeta& meta, const AdamState* optimizer = nullptr);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace crcnn
