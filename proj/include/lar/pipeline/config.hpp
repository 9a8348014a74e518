#pragma once

#include "lar/numerics/adam.hpp"
#include "lar/transformer/transformer.hpp"
#include "lar/tsvq/tsvq.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lar::pipeline {

/// Synthetic scene generator settings.
struct DataConfig {
  int image_size = 32;
  int count = 256;
  int glyph_min = 5;    ///< glyph side range in pixels
  int glyph_max = 9;
  int max_shift = 6;    ///< pose offset bound per axis
  int mask_margin = 2;  ///< dilation around each glyph box
  int n_landmarks = 5;

  void validate() const;
};

/// Everything a run needs, read from a flat key=value file.
///
/// Lines are `key = value`; `#` starts a comment. Unknown or repeated keys
/// are rejected. See README.md for the key list.
struct RunConfig {
  std::string stage;  ///< optional: "vq" or "transformer"
  std::uint64_t seed = 0;

  DataConfig data;
  tsvq::VqConfig vq;
  transformer::TransformerConfig transformer;

  int vq_output_norm = 0;  ///< mirrors VqConfig::output_norm

  AdamConfig vq_adam{5e-4, 0.5, 0.9, 1e-8, 0.0};
  int vq_pretrain_steps = 2000;
  int vq_finetune_steps = 2000;
  int vq_batch = 16;
  int vq_decay_every = 667;  ///< lr halves every this many steps; 0 disables

  AdamConfig tr_adam{5e-4, 0.9, 0.95, 1e-8, 0.01};
  int tr_steps = 5000;
  int tr_batch = 16;
  int tr_warmup = 200;

  transformer::SamplerConfig sampler;
  int checkpoint_every = 0;  ///< 0 writes only the final checkpoint
  std::string vq_checkpoint = "vq.ckpt";
  std::string transformer_checkpoint = "transformer.ckpt";

  /// Derives the VQ and transformer geometry from the shared keys and checks
  /// that both stages agree.
  void finalize();
  void validate() const;

  /// Hash of the keys that fix parameter shapes.
  std::uint64_t vq_digest() const;
  std::uint64_t transformer_digest() const;
};

RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);
/// Canonical key=value text; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

/// Resolves a configured path against the output directory.
std::filesystem::path resolve(const std::filesystem::path& out_dir, const std::string& path);

}  // namespace lar::pipeline
