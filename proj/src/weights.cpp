#include <bit>
#include <cstring>

#include "kra/detector.hpp"
#include "kra/error.hpp"
#include "kra/image_io.hpp"

namespace kra {
namespace {

constexpr char kMagic[4] = {'K', 'R', 'A', 'W'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u(int width) {
    if (pos_ + static_cast<std::size_t>(width) > bytes_.size()) {
      throw Error(ErrorCode::checksum_mismatch, "weights file truncated");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    }
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
  std::uint64_t u64() { return u(8); }

  std::string str(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw Error(ErrorCode::checksum_mismatch, "weights file truncated");
    }
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_weights(const Detector& detector) {
  const auto& arch = detector.architecture();
  find_architecture(arch.id);
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kWeightsFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(arch.id.size()));
  out += arch.id;
  put_u32(out, static_cast<std::uint32_t>(detector.parameters().size()));
  for (const auto& p : detector.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(p.rank()));
    for (std::size_t d : p.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  put_u64(out, fnv1a(out));
  return out;
}

Detector decode_weights(const std::string& bytes,
                        std::optional<std::string_view> expected_arch) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::io, "not a detector weights file (bad magic)");
  }
  if (bytes.size() < sizeof kMagic + 8 + 8) {
    throw Error(ErrorCode::checksum_mismatch, "weights file truncated");
  }
  const std::string_view body(bytes.data(), bytes.size() - 8);
  if (Reader(std::string_view(bytes).substr(body.size())).u64() != fnv1a(body)) {
    throw Error(ErrorCode::checksum_mismatch, "weights checksum mismatch");
  }

  Reader r(body.substr(sizeof kMagic));
  const std::uint32_t version = r.u32();
  if (version != kWeightsFormatVersion) {
    throw Error(ErrorCode::version_mismatch,
                "weights format version " + std::to_string(version) +
                    ", expected " + std::to_string(kWeightsFormatVersion));
  }
  const std::string arch_id = r.str(r.u32());
  const Architecture& arch = find_architecture(arch_id);
  if (expected_arch && *expected_arch != arch_id) {
    throw Error(ErrorCode::unknown_architecture,
                "weights are for architecture '" + arch_id + "', expected '" +
                    std::string(*expected_arch) + "'");
  }
  const std::uint32_t count = r.u32();
  if (count != arch.parameter_shapes().size()) {
    throw Error(ErrorCode::shape_mismatch, "parameter count does not match architecture");
  }
  std::vector<Tensor> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    Tensor t(shape);
    for (double& v : t.data()) v = std::bit_cast<double>(r.u64());
    params.push_back(std::move(t));
  }
  if (!r.done()) throw Error(ErrorCode::io, "trailing bytes in weights file");
  return Detector(arch, std::move(params));
}

void save_weights(const Detector& detector, const std::filesystem::path& path) {
  write_file(path, encode_weights(detector));
}

Detector load_weights(const std::filesystem::path& path,
                      std::optional<std::string_view> expected_arch) {
  try {
    return decode_weights(read_file(path), expected_arch);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace kra
