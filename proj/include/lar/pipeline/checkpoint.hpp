#pragma once

#include "lar/numerics/adam.hpp"
#include "lar/tsvq/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lar::pipeline {

inline constexpr char kCheckpointMagic[8] = {'L', 'A', 'R', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Parameters are stored as little-endian float32. Optimizer moments, when
/// present, are stored as float64 so a resumed run continues from the exact
/// saved state.
struct Checkpoint {
  std::uint64_t digest = 0;
  std::int64_t step = 0;
  std::vector<CheckpointEntry> params;
  std::optional<AdamState> optimizer;
};

Checkpoint make_checkpoint(const ParamList& params, std::uint64_t digest, std::int64_t step,
                           const AdamState* optimizer = nullptr);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `params` (matched by name and shape). Throws
/// ConfigError on a digest mismatch and DataError on a missing or
/// misshapen parameter.
void apply_checkpoint(const Checkpoint& ckpt, const ParamList& params, std::uint64_t expected_digest);

}  // namespace lar::pipeline
