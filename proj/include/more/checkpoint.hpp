#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "more/model.hpp"

namespace more {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Container layout (little-endian):
///   "MORE" | u16 version | u32 n_meta | n_meta × (str key, str value)
///   | u32 n_tensors | n_tensors × (str name, u8 dtype, u32 rank, rank × u64 dim, f32 payload)
///   | u64 FNV-1a of every preceding byte
/// where str is u32 length + UTF-8 bytes and dtype 0 is f32.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model parameters plus "arch", "seed" and "fingerprint" metadata.
Checkpoint model_checkpoint(const Model& model, std::map<std::string, std::string> extra = {});
Model model_from_checkpoint(const Checkpoint& ckpt);

void save_model(const Model& model, const std::filesystem::path& path, std::map<std::string, std::string> extra = {});
Model load_model(const std::filesystem::path& path);

}  // namespace more
