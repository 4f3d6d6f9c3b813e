#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace tal {

/// Which granularity branches of the multi-granularity block are active.
struct BranchMask {
  bool instant = true;
  bool local = true;
  bool global = true;

  bool any() const { return instant || local || global; }
  /// Parses a comma list such as "instant,global" (order-insensitive).
  static BranchMask parse(std::string_view text);
  std::string to_string() const;
  bool operator==(const BranchMask&) const = default;
};

struct EncoderConfig {
  std::size_t input_dim = 32;
  std::size_t channels = 64;
  std::size_t levels = 6;
  std::size_t blocks_per_level = 1;
  std::size_t group_count = 8;
  std::size_t ffn_expansion = 4;
  bool gate_enabled = true;
  BranchMask branches;

  /// Throws ConfigError.
  void validate() const;
  /// Shortest sequence that still yields `levels` non-empty levels.
  std::size_t min_length() const { return std::size_t{1} << (levels - 1); }
};

enum class Fusion { Attention, Add, Concat };

Fusion parse_fusion(std::string_view text);
std::string_view to_string(Fusion fusion);

struct DecoderConfig {
  std::size_t num_classes = 5;
  std::size_t bins = 16;
  Fusion fusion = Fusion::Attention;
  bool decouple = true;
  bool refine_cls = true;
  bool refine_reg = true;

  void validate() const;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  void validate() const {
    encoder.validate();
    decoder.validate();
  }
};

}  // namespace tal
