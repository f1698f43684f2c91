#include "kra/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kra/error.hpp"
#include "kra/image_io.hpp"
#include "kra/rng.hpp"

namespace kra {
namespace {

constexpr double kCheckerAmplitude = 0.02;
constexpr double kBlendWeight = 0.5;

struct Octave {
  std::size_t cells;
  double amplitude;
};
constexpr Octave kOctaves[] = {{4, 0.22}, {8, 0.08}};

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Value noise on a (cells+1)^2 lattice, smoothly interpolated.
void add_octave(Rng& rng, const Octave& octave, std::size_t height,
                std::size_t width, double* plane) {
  const std::size_t n = octave.cells + 1;
  std::vector<double> lattice(n * n);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  for (std::size_t y = 0; y < height; ++y) {
    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(height) *
                     static_cast<double>(octave.cells);
    const auto iy = std::min(static_cast<std::size_t>(v), octave.cells - 1);
    const double fy = smoothstep(v - static_cast<double>(iy));
    for (std::size_t x = 0; x < width; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(width) *
                       static_cast<double>(octave.cells);
      const auto ix = std::min(static_cast<std::size_t>(u), octave.cells - 1);
      const double fx = smoothstep(u - static_cast<double>(ix));
      const double top = lattice[iy * n + ix] * (1 - fx) + lattice[iy * n + ix + 1] * fx;
      const double bottom =
          lattice[(iy + 1) * n + ix] * (1 - fx) + lattice[(iy + 1) * n + ix + 1] * fx;
      plane[y * width + x] += octave.amplitude * (top * (1 - fy) + bottom * fy);
    }
  }
}

Tensor texture(Rng& rng, const ImageDims& dims) {
  Tensor t(dims.shape());
  const std::size_t plane = dims.height * dims.width;
  for (std::size_t c = 0; c < dims.channels; ++c) {
    double* p = t.data().data() + c * plane;
    std::fill(p, p + plane, rng.uniform(0.25, 0.75));
    for (const auto& octave : kOctaves) add_octave(rng, octave, dims.height, dims.width, p);
  }
  return t;
}

void snap_to_grid(Tensor& t) {
  for (double& v : t.data()) v = static_cast<double>(quantize(v)) / 255.0;
}

Rng image_rng(std::uint64_t seed) {
  return Rng(mix_seed(seed ^ (static_cast<std::uint64_t>(kGeneratorVersion) << 56)));
}

void require_dims(const ImageDims& dims) {
  if (dims.channels == 0 || dims.height < 2 || dims.width < 2) {
    throw Error(ErrorCode::invalid_argument, "image dims must be at least 1x2x2");
  }
}

}  // namespace

ArtifactRegion artifact_region(const ImageDims& dims) {
  ArtifactRegion r;
  r.height = dims.height / 4 * 2;
  r.width = dims.width / 4 * 2;
  r.top = (dims.height - r.height) / 4 * 2;
  r.left = (dims.width - r.width) / 4 * 2;
  return r;
}

std::string LabeledImage::id() const {
  return std::string(to_string(label)) + "_" + std::to_string(seed);
}

LabeledImage generate_real(std::uint64_t seed, ImageDims dims) {
  require_dims(dims);
  Rng rng = image_rng(seed);
  Tensor t = texture(rng, dims);
  snap_to_grid(t);
  return {std::move(t), Label::real, seed};
}

LabeledImage generate_fake(std::uint64_t seed, ImageDims dims) {
  require_dims(dims);
  if (dims.height % 2 != 0 || dims.width % 2 != 0) {
    throw Error(ErrorCode::invalid_argument, "fake images need even height and width");
  }
  Rng rng = image_rng(seed);
  const Tensor base = texture(rng, dims);
  const double phase = rng.uniform() < 0.5 ? 1.0 : -1.0;
  const ArtifactRegion region = artifact_region(dims);

  Tensor t(dims.shape());
  for (std::size_t c = 0; c < dims.channels; ++c) {
    for (std::size_t y = 0; y < dims.height; ++y) {
      for (std::size_t x = 0; x < dims.width; ++x) {
        const std::size_t y0 = y & ~std::size_t{1}, x0 = x & ~std::size_t{1};
        const double half = 0.25 * (base.at(c, y0, x0) + base.at(c, y0, x0 + 1) +
                                    base.at(c, y0 + 1, x0) + base.at(c, y0 + 1, x0 + 1));
        const double checker = ((x + y) % 2 == 0 ? 1.0 : -1.0) * phase * kCheckerAmplitude;
        t.at(c, y, x) = region.contains(y, x) ? (1.0 - kBlendWeight) * base.at(c, y, x) +
                                                   kBlendWeight * half + checker
                                             : base.at(c, y, x);
      }
    }
  }
  snap_to_grid(t);
  return {std::move(t), Label::fake, seed};
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw Error(ErrorCode::invalid_argument, "unknown split '" + name + "'");
}

std::size_t DatasetManifest::per_class(Split split) const {
  switch (split) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return 0;
}

std::pair<std::uint64_t, std::uint64_t> DatasetManifest::seed_range(Split split) const {
  std::uint64_t first = seed;
  if (split != Split::train) first += train;
  if (split == Split::test) first += val;
  return {first, first + per_class(split)};
}

std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream out;
  out << "version=" << m.version << "\n"
      << "seed=" << m.seed << "\n"
      << "dims=" << m.dims.channels << "x" << m.dims.height << "x" << m.dims.width << "\n"
      << "counts=" << m.train << "/" << m.val << "/" << m.test << "\n";
  return out.str();
}

DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  bool seen[4] = {};
  std::istringstream in(text);
  std::string line;
  auto bad = [](const std::string& why) {
    return Error(ErrorCode::io, "manifest: " + why);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bad("malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    char sep1 = 0, sep2 = 0;
    std::istringstream v(value);
    if (key == "version") {
      v >> m.version;
      seen[0] = true;
    } else if (key == "seed") {
      v >> m.seed;
      seen[1] = true;
    } else if (key == "dims") {
      v >> m.dims.channels >> sep1 >> m.dims.height >> sep2 >> m.dims.width;
      if (sep1 != 'x' || sep2 != 'x') throw bad("bad dims '" + value + "'");
      seen[2] = true;
    } else if (key == "counts") {
      v >> m.train >> sep1 >> m.val >> sep2 >> m.test;
      if (sep1 != '/' || sep2 != '/') throw bad("bad counts '" + value + "'");
      seen[3] = true;
    } else {
      throw bad("unknown key '" + key + "'");
    }
    if (v.fail()) throw bad("bad value for '" + key + "'");
  }
  if (!(seen[0] && seen[1] && seen[2] && seen[3])) throw bad("missing keys");
  if (m.version != kGeneratorVersion) {
    throw Error(ErrorCode::version_mismatch,
                "manifest generator version " + std::to_string(m.version) +
                    ", this build generates version " + std::to_string(kGeneratorVersion));
  }
  return m;
}

std::vector<LabeledImage> generate_split(const DatasetManifest& manifest, Split split) {
  std::vector<LabeledImage> images;
  const auto [first, last] = manifest.seed_range(split);
  images.reserve(2 * (last - first));
  for (std::uint64_t s = first; s < last; ++s) {
    images.push_back(generate_real(s, manifest.dims));
    images.push_back(generate_fake(s, manifest.dims));
  }
  return images;
}

void build_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  if (manifest.train == 0 || manifest.val == 0 || manifest.test == 0) {
    throw Error(ErrorCode::invalid_argument, "dataset split counts must be positive");
  }
  if (manifest.dims.channels != 3) {
    throw Error(ErrorCode::invalid_argument, "datasets are stored as RGB pixmaps");
  }
  std::error_code ec;
  for (Split split : {Split::train, Split::val, Split::test}) {
    const auto sub = dir / to_string(split);
    std::filesystem::create_directories(sub, ec);
    if (ec) throw Error(ErrorCode::io, "cannot create " + sub.string() + ": " + ec.message());
    for (const auto& image : generate_split(manifest, split)) {
      write_ppm(sub / (image.id() + ".ppm"), image.pixels);
    }
  }
  write_file(dir / "manifest.txt", format_manifest(manifest));
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  try {
    return parse_manifest(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::vector<LabeledImage> load_split(const std::filesystem::path& dir, Split split) {
  const DatasetManifest manifest = read_manifest(dir);
  const auto [first, last] = manifest.seed_range(split);
  std::vector<LabeledImage> images;
  images.reserve(2 * (last - first));
  for (std::uint64_t s = first; s < last; ++s) {
    for (Label label : {Label::real, Label::fake}) {
      LabeledImage image{Tensor{}, label, s};
      const auto path = dir / to_string(split) / (image.id() + ".ppm");
      image.pixels = read_ppm(path);
      if (image.pixels.shape() != manifest.dims.shape()) {
        throw Error(ErrorCode::shape_mismatch,
                    path.string() + ": dims " + shape_string(image.pixels.shape()) +
                        " disagree with manifest");
      }
      images.push_back(std::move(image));
    }
  }
  return images;
}

}  // namespace kra
