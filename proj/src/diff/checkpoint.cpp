#include "tal/diff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "tal/errors.hpp"

namespace tal::diff {
namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [path, value] : params) {
    if (path.size() > std::numeric_limits<std::uint16_t>::max()) throw IoError("checkpoint path too long: " + path);
    if (value.rank() > std::numeric_limits<std::uint8_t>::max()) throw IoError("rank too large for " + path);
    put_u16(out, static_cast<std::uint16_t>(path.size()));
    out.insert(out.end(), path.begin(), path.end());
    put_u8(out, static_cast<std::uint8_t>(value.rank()));
    for (std::size_t d : value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : value.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (in.text(4, "magic") != std::string(kCheckpointMagic, 4)) throw IoError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = in.u32("entry count");
  ParamSet out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t len = in.u16("path length");
    std::string path = in.text(len, "path");
    const std::uint8_t rank = in.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.u32("dims");
    std::vector<double> data(numel(shape));
    for (double& v : data) v = static_cast<double>(std::bit_cast<float>(in.u32("payload")));
    if (out.contains(path)) throw IoError("duplicate checkpoint entry " + path);
    out.set(std::move(path), Array(std::move(shape), std::move(data)));
  }
  if (!in.done()) throw IoError("trailing bytes after checkpoint entries");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

ParamSet round_to_f32(const ParamSet& params) {
  ParamSet out = params;
  for (auto& [path, value] : out) {
    for (double& v : value.values()) v = static_cast<double>(static_cast<float>(v));
  }
  return out;
}

}  // namespace tal::diff
