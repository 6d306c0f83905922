// Single-file checkpoint container.
//
//   DQE-CHECKPOINT <version>\n
//   arch.<key>=<value>\n ...        architecture echo, ArchConfig order
//   meta.<key>=<value>\n ...        variant, seed, step, free-form metadata
//   components=<comma list>\n
//   tensors=<n>\n
//   blobs=<n>\n
//   \n
//   then n records:  "<name> <dtype> <ndim> <d0> ... <nbytes>\n" + raw little-endian bytes
//   then blobs:      "<name> <nbytes>\n" + bytes
//
// Tensors are stored in their in-memory dtype, so save -> load is bit-exact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dqe/nets.hpp"

namespace dqe {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelWeights weights;
  // Opaque extras, e.g. serialised optimiser state.
  std::map<std::string, std::vector<std::uint8_t>> blobs;
};

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights,
                     const std::map<std::string, std::vector<std::uint8_t>>& blobs = {});

// When `expected` is given, a differing architecture is rejected with a
// ConfigError naming the first differing key.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ArchConfig>& expected = std::nullopt);

std::string components_to_string(unsigned components);
unsigned parse_components(const std::string& s);

}  // namespace dqe
