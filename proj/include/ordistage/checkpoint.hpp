#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ordistage/tensor.hpp"

namespace ordistage {

/// Named parameter handles. std::map keeps the lexicographic name order the
/// checkpoint layout depends on.
using ParameterMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout, all integers little-endian:
///   "OSTG" | u32 version | u32 count |
///   count × ( u16 name_len | name bytes | u8 rank | rank × u32 dim | f64 values )
std::vector<std::uint8_t> encode_checkpoint(const ParameterMap& params);
ParameterMap decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterMap& params);
ParameterMap load_checkpoint(const std::filesystem::path& path);

/// Copies values from `source` into the same-named tensors of `target`.
/// Every target name must be present with an identical shape.
void assign_parameters(const ParameterMap& target, const ParameterMap& source);

/// Deep copy of values (no shared storage, no gradients).
ParameterMap snapshot_parameters(const ParameterMap& params);

}  // namespace ordistage
