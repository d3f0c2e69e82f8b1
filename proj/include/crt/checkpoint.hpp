#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "crt/nn.hpp"

namespace crt::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  double sigma = 0.0;              // noise level the model was trained at
  std::string method = "standard";  // standard | gaussian-aug | crt
  std::optional<std::uint64_t> parent_checksum;  // teacher checkpoint, if any
  std::optional<double> teacher_sigma;           // sigma recorded in the teacher
  std::uint32_t chain_length = 0;                // CRT transfers since the robust root

  bool sigma_mismatch() const { return teacher_sigma && *teacher_sigma != sigma; }

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  Model model;
  CheckpointMeta meta;
};

// Binary layout, all integers and floats little-endian:
//
//   "CRTCKPT1"                         8-byte magic
//   u32 format version
//   str arch_id                        (u32 length + bytes)
//   u32 num_classes
//   u32 rank, u64 dims[rank]           per-sample input shape
//   f64 sigma
//   str method
//   u8 has_parent, u64 parent checksum
//   u8 has_teacher_sigma, f64 teacher sigma
//   u32 chain_length
//   u32 tensor count, then per tensor: str name, u32 rank, u64 dims[rank], f64 values
//   u64 FNV-1a of every preceding byte
//
// The model is rebuilt from (arch_id, input shape, num_classes) via
// make_preset, so only preset architectures can be checkpointed.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);

/// The trailing content checksum of the serialized checkpoint.
std::uint64_t checkpoint_checksum(const Checkpoint& checkpoint);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace crt::nn
