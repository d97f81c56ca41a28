#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "questmf/layers.hpp"

namespace questmf {

// Training provenance carried inside a checkpoint file.
struct CheckpointMeta {
  std::string stage;       // "stage1" or "stage2"
  std::string framework;   // "questmf" or "total"
  std::string loss;        // "mse", "oll", "imboll"
  std::string modalities;  // comma-separated canonical list
  int question = -1;       // 0..7, or -1 for the total framework
  std::uint64_t epoch = 0;
  double val_loss = 0.0;
  double val_ccc = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor>> tensors;  // registration order
};

// Binary container: magic "QMC1", a format version, a JSON metadata block,
// then named float64 tensors, all little-endian. Writes go to a temporary
// file in the same directory and are renamed into place.
void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ParamSet& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Restores every parameter by name; names and shapes must match exactly and
// every stored tensor must be consumed.
void restore_params(ParamSet& params, const Checkpoint& ckpt);

// Copies stored tensors whose name starts with `prefix` onto same-named
// parameters; returns how many were copied. Used to seed fusion branches
// from stage-1 encoders.
std::size_t overlay_params(ParamSet& params, const Checkpoint& ckpt, std::string_view prefix);

}  // namespace questmf
