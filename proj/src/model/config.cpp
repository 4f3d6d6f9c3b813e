#include "tal/model/config.hpp"

#include <sstream>

#include "tal/errors.hpp"

namespace tal {

BranchMask BranchMask::parse(std::string_view text) {
  BranchMask mask{false, false, false};
  std::string item;
  std::stringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    if (item == "instant") {
      mask.instant = true;
    } else if (item == "local") {
      mask.local = true;
    } else if (item == "global") {
      mask.global = true;
    } else if (!item.empty()) {
      throw ConfigError("unknown branch '" + item + "' (expected instant, local, global)");
    }
  }
  if (!mask.any()) throw ConfigError("branch mask must name at least one branch");
  return mask;
}

std::string BranchMask::to_string() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ",";
    out += name;
  };
  add(instant, "instant");
  add(local, "local");
  add(global, "global");
  return out;
}

void EncoderConfig::validate() const {
  if (input_dim == 0) throw ConfigError("encoder.input_dim must be positive");
  if (channels == 0) throw ConfigError("encoder.channels must be positive");
  if (levels < 2) throw ConfigError("encoder.levels must be >= 2");
  if (levels > 16) throw ConfigError("encoder.levels must be <= 16");
  if (blocks_per_level == 0) throw ConfigError("encoder.blocks_per_level must be positive");
  if (group_count == 0 || channels % group_count != 0) {
    throw ConfigError("encoder.channels (" + std::to_string(channels) + ") must be divisible by group_count (" +
                      std::to_string(group_count) + ")");
  }
  if (ffn_expansion == 0) throw ConfigError("encoder.ffn_expansion must be positive");
  if (!branches.any()) throw ConfigError("encoder.branches must be non-empty");
}

Fusion parse_fusion(std::string_view text) {
  if (text == "attention") return Fusion::Attention;
  if (text == "add") return Fusion::Add;
  if (text == "concat") return Fusion::Concat;
  throw ConfigError("unknown fusion '" + std::string(text) + "' (expected attention, add, concat)");
}

std::string_view to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::Attention: return "attention";
    case Fusion::Add: return "add";
    case Fusion::Concat: return "concat";
  }
  return "attention";
}

void DecoderConfig::validate() const {
  if (num_classes == 0) throw ConfigError("decoder.num_classes must be >= 1");
  if (bins == 0) throw ConfigError("decoder.bins must be >= 1");
}

}  // namespace tal
