#pragma once

#include "topk/behavior_model.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace topk {

/// Binary checkpoint layout, all integers and doubles little-endian:
///
///   "TOPKCKPT" | u32 version | u64 n | u64 m | u64 |A| | u32 section count
///   per section: u32 name length | name | u64 rows | u64 cols | rows*cols f64 (column-major)
///
/// Policy tensors are stored as "policy/<name>" in declared order; the
/// behavior head, when present, as "behavior/V_prime".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PolicyParameters policy;
  std::optional<BehaviorHead> behavior;
};

std::string encode_checkpoint(const PolicyParameters& policy, const BehaviorHead* behavior = nullptr);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const PolicyParameters& policy,
                     const BehaviorHead* behavior = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace topk
