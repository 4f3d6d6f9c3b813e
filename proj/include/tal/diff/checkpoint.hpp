#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tal/diff/params.hpp"

namespace tal::diff {

// Checkpoint layout, all integers little-endian:
//   "CGMG" | version u32 | entry count u32
//   per entry: path length u16 | path bytes | rank u8 | dims u32 x rank | f32 x numel
// Entries are written in path order, so identical parameter sets produce
// identical bytes.

inline constexpr char kCheckpointMagic[4] = {'C', 'G', 'M', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

/// Rounds every value through 32-bit storage, matching a save/load cycle.
ParamSet round_to_f32(const ParamSet& params);

}  // namespace tal::diff
