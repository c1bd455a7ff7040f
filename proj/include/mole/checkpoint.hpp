// Named-tensor checkpoint archive and the stable hashes used for
// reproducibility checks.
//
// File layout: magic "MOLECKP1", u64 metadata length, metadata JSON (UTF-8),
// u64 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
// u64 dims, raw little-endian float64 payload. Round trips are bit-exact.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mole/tensor.hpp"

namespace mole {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t hash = kFnvOffset);

/// Hash over names, shapes, and payload bytes in list order.
std::uint64_t hash_named_tensors(const std::vector<std::pair<std::string, Tensor>>& named);

/// Hash of a file's raw bytes.
std::uint64_t hash_file(const std::string& path);

std::string hash_to_hex(std::uint64_t hash);

struct Checkpoint {
  std::string metadata_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

/// Copies values from `source` into same-named destination tensors; every
/// destination name must be present with a matching shape.
void load_into(const std::vector<std::pair<std::string, Tensor>>& destination,
               const Checkpoint& source);

}  // namespace mole
