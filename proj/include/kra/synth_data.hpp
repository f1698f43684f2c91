#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kra/label.hpp"
#include "kra/tensor.hpp"

namespace kra {

// Bumped whenever generated pixels would change for a given seed.
inline constexpr int kGeneratorVersion = 2;

struct ImageDims {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  Shape shape() const { return {channels, height, width}; }
  bool operator==(const ImageDims&) const = default;
};

struct LabeledImage {
  Tensor pixels;  // C x H x W, values in [0,1] on the 8-bit grid
  Label label = Label::real;
  std::uint64_t seed = 0;

  std::string id() const;  // "<label>_<seed>"
};

// Smooth colored value-noise texture.
LabeledImage generate_real(std::uint64_t seed, ImageDims dims = {});

// Where generate_fake places its artifact: the central square-ish block of
// half the image height and width, aligned to even coordinates. For 32x32
// images this is rows and columns 8..23.
struct ArtifactRegion {
  std::size_t top = 0, left = 0, height = 0, width = 0;

  bool contains(std::size_t y, std::size_t x) const noexcept {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
};

ArtifactRegion artifact_region(const ImageDims& dims);

// The texture generate_real(seed) draws. Inside artifact_region it is blended
// 50/50 with a 2x nearest-neighbour upsample of its half-resolution copy and
// carries a +/-0.02 checkerboard of random phase; outside it is unchanged.
// Requires even H and W.
LabeledImage generate_fake(std::uint64_t seed, ImageDims dims = {});

enum class Split { train, val, test };

const char* to_string(Split split);
Split parse_split(const std::string& name);

struct DatasetManifest {
  int version = kGeneratorVersion;
  std::uint64_t seed = 1234;
  ImageDims dims;
  // Images per class in each split; every seed yields a real/fake pair.
  std::size_t train = 100;
  std::size_t val = 20;
  std::size_t test = 20;

  std::size_t per_class(Split split) const;
  // Half-open seed range [first, second). Ranges of distinct splits are
  // disjoint and adjacent: train, then val, then test.
  std::pair<std::uint64_t, std::uint64_t> seed_range(Split split) const;
  std::size_t total_images() const { return 2 * (train + val + test); }

  bool operator==(const DatasetManifest&) const = default;
};

std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text);

// Images of one split, ordered by seed with real before fake.
std::vector<LabeledImage> generate_split(const DatasetManifest& manifest,
                                         Split split);

// Writes <dir>/manifest.txt and <dir>/<split>/<label>_<seed>.ppm.
void build_dataset(const DatasetManifest& manifest,
                   const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<LabeledImage> load_split(const std::filesystem::path& dir,
                                     Split split);

}  // namespace kra
