#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "kinflow/core.hpp"

namespace kinflow::checkpoint {

inline constexpr uint32_t kVersion = 1;

/// Single-file container: magic "KFCK", u32 version, u32 section count, then
/// named sections (tensor, bytes or u64). All integers and tensor payloads are
/// little-endian.
struct Checkpoint {
  std::string architecture;  // must match the model being restored
  std::string config_json;   // echo of the training config
  std::string phase;
  int64_t step = 0;
  uint64_t seed = 0;
  std::map<std::string, Tensor> params;  // model parameters and buffers
  std::string optimizer;                 // serialised optimizer state (may be empty)
  std::string data_state;                // dataset iterator state
  std::string rng_state;                 // trainer engine state (alpha sampling)
};

void save(const Checkpoint& ckpt, const std::filesystem::path& path);
/// FormatError on bad magic, unknown version or truncation; IoError when the
/// file cannot be opened.
Checkpoint load(const std::filesystem::path& path);

/// Copies a named tensor map into a module's parameters and buffers. Every
/// module entry must be present with the same shape (FormatError otherwise).
void copy_into(torch::nn::Module& module, const std::map<std::string, Tensor>& params);
std::map<std::string, Tensor> snapshot(const torch::nn::Module& module);

}  // namespace kinflow::checkpoint
