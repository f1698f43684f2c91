#include "kra/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "kra/error.hpp"

namespace kra {
namespace {

// Reads the whitespace/comment separated header fields of a P5/P6 file.
class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : bytes_(bytes) {}

  std::string magic() {
    if (bytes_.size() < 2) fail("truncated header");
    pos_ = 2;
    return bytes_.substr(0, 2);
  }

  std::size_t number() {
    skip_space();
    if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      fail("expected a number in header");
    }
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
      if (v > (1u << 24)) fail("header value too large");
    }
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      fail("missing separator before raster");
    }
    return pos_ + 1;
  }

  [[noreturn]] static void fail(const std::string& why) {
    throw Error(ErrorCode::io, "netpbm: " + why);
  }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

Tensor decode_netpbm(const std::string& bytes, const char* expected_magic,
                     std::size_t channels) {
  HeaderReader header(bytes);
  if (header.magic() != expected_magic) {
    HeaderReader::fail(std::string("expected magic ") + expected_magic);
  }
  const std::size_t width = header.number();
  const std::size_t height = header.number();
  const std::size_t maxval = header.number();
  if (maxval == 0 || maxval > 255) HeaderReader::fail("only 8-bit maxval is supported");
  const std::size_t start = header.raster_start();
  const std::size_t count = width * height * channels;
  if (bytes.size() < start + count) HeaderReader::fail("truncated raster");

  Tensor out({channels, height, width});
  const double maxv = static_cast<double>(maxval);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const auto byte = static_cast<unsigned char>(
            bytes[start + (y * width + x) * channels + c]);
        out.at(c, y, x) = static_cast<double>(byte) / maxv;
      }
    }
  }
  return out;
}

}  // namespace

std::uint8_t quantize(double value) noexcept {
  const double v = std::clamp(value, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

std::string encode_ppm(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw Error(ErrorCode::shape_mismatch,
                "ppm needs a 3 x H x W tensor, got " + shape_string(rgb.shape()));
  }
  const std::size_t h = rgb.dim(1), w = rgb.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out.push_back(static_cast<char>(quantize(rgb.at(c, y, x))));
      }
    }
  }
  return out;
}

Tensor decode_ppm(const std::string& bytes) { return decode_netpbm(bytes, "P6", 3); }

std::string encode_pgm(const Tensor& gray) {
  const bool planar = gray.rank() == 3 && gray.dim(0) == 1;
  if (gray.rank() != 2 && !planar) {
    throw Error(ErrorCode::shape_mismatch,
                "pgm needs an H x W tensor, got " + shape_string(gray.shape()));
  }
  const std::size_t h = gray.dim(gray.rank() - 2), w = gray.dim(gray.rank() - 1);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : gray.data()) out.push_back(static_cast<char>(quantize(v)));
  return out;
}

Tensor decode_pgm(const std::string& bytes) {
  Tensor t = decode_netpbm(bytes, "P5", 1);
  return t.reshaped({t.dim(1), t.dim(2)});
}

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  write_file(path, encode_ppm(rgb));
}

Tensor read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
  write_file(path, encode_pgm(gray));
}

Tensor normalize_for_display(const Tensor& t) {
  Tensor out(t.shape());
  if (t.empty()) return out;
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double range = *hi - *lo;
  if (range == 0.0) return out;
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = (t[i] - *lo) / range;
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorCode::io, "read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) {
      throw Error(ErrorCode::io,
                  "cannot create " + path.parent_path().string() + ": " + ec.message());
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw Error(ErrorCode::io, "write failed: " + path.string());
}

}  // namespace kra
