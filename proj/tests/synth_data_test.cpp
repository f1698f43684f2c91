#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "kra/error.hpp"
#include "kra/image_io.hpp"
#include "kra/synth_data.hpp"

namespace kra {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kra_test_" + name);
  fs::remove_all(p);
  return p;
}

// Sum of squared 4-neighbour Laplacian responses inside the artifact region.
double region_laplacian_energy(const Tensor& img) {
  const ArtifactRegion r = artifact_region({img.dim(0), img.dim(1), img.dim(2)});
  double e = 0.0;
  for (std::size_t c = 0; c < img.dim(0); ++c) {
    for (std::size_t y = r.top + 1; y + 1 < r.top + r.height; ++y) {
      for (std::size_t x = r.left + 1; x + 1 < r.left + r.width; ++x) {
        const double l = 4 * img.at(c, y, x) - img.at(c, y - 1, x) - img.at(c, y + 1, x) -
                         img.at(c, y, x - 1) - img.at(c, y, x + 1);
        e += l * l;
      }
    }
  }
  return e;
}

TEST(SynthData, DeterministicAndOnTheByteGrid) {
  for (std::uint64_t seed : {0ull, 1ull, 77ull, 123456789ull}) {
    for (bool fake : {false, true}) {
      const LabeledImage a = fake ? generate_fake(seed) : generate_real(seed);
      const LabeledImage b = fake ? generate_fake(seed) : generate_real(seed);
      EXPECT_EQ(a.pixels, b.pixels);
      EXPECT_EQ(a.pixels.shape(), (Shape{3, 32, 32}));
      for (double v : a.pixels.data()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        ASSERT_DOUBLE_EQ(v * 255.0, std::round(v * 255.0));
      }
    }
  }
  EXPECT_NE(generate_real(1).pixels, generate_real(2).pixels);
}

TEST(SynthData, ArtifactRegionIsCentral) {
  const ArtifactRegion r = artifact_region(ImageDims{});
  EXPECT_EQ(r.top, 8u);
  EXPECT_EQ(r.left, 8u);
  EXPECT_EQ(r.height, 16u);
  EXPECT_EQ(r.width, 16u);
  EXPECT_TRUE(r.contains(8, 23));
  EXPECT_FALSE(r.contains(7, 10));
  EXPECT_FALSE(r.contains(10, 24));
}

// Property: a fake differs from its real twin only inside the artifact
// region, and it carries more high-frequency energy there. 200 seeds.
TEST(SynthData, FakeArtifactIsConfinedAndHighFrequency) {
  const ImageDims dims;
  const ArtifactRegion region = artifact_region(dims);
  for (std::uint64_t seed = 5000; seed < 5200; ++seed) {
    const Tensor real = generate_real(seed).pixels;
    const Tensor fake = generate_fake(seed).pixels;
    std::size_t changed_inside = 0;
    for (std::size_t c = 0; c < dims.channels; ++c) {
      for (std::size_t y = 0; y < dims.height; ++y) {
        for (std::size_t x = 0; x < dims.width; ++x) {
          if (region.contains(y, x)) {
            changed_inside += real.at(c, y, x) != fake.at(c, y, x);
          } else {
            ASSERT_EQ(real.at(c, y, x), fake.at(c, y, x)) << "seed " << seed;
          }
        }
      }
    }
    EXPECT_GT(changed_inside, 0u);
    EXPECT_GT(region_laplacian_energy(fake), region_laplacian_energy(real)) << "seed " << seed;
  }
}

TEST(SynthData, InvalidDims) {
  EXPECT_THROW(generate_fake(1, ImageDims{3, 31, 32}), Error);
  EXPECT_THROW(generate_real(1, ImageDims{0, 32, 32}), Error);
}

TEST(SynthData, ManifestRoundTripAndSeedRanges) {
  DatasetManifest m;
  m.seed = 42;
  m.train = 7;
  m.val = 3;
  m.test = 5;
  EXPECT_EQ(parse_manifest(format_manifest(m)), m);
  EXPECT_EQ(m.seed_range(Split::train), (std::pair<std::uint64_t, std::uint64_t>{42, 49}));
  EXPECT_EQ(m.seed_range(Split::val), (std::pair<std::uint64_t, std::uint64_t>{49, 52}));
  EXPECT_EQ(m.seed_range(Split::test), (std::pair<std::uint64_t, std::uint64_t>{52, 57}));
  EXPECT_EQ(m.total_images(), 30u);

  DatasetManifest old = m;
  old.version = kGeneratorVersion - 1;
  try {
    generate_split(parse_manifest(format_manifest(old)), Split::train);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::version_mismatch);
  }
}

TEST(SynthData, SplitsAreBalancedAndDisjoint) {
  DatasetManifest m;
  m.train = 6;
  m.val = 2;
  m.test = 3;
  std::set<std::string> ids;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto images = generate_split(m, s);
    ASSERT_EQ(images.size(), 2 * m.per_class(s));
    for (std::size_t i = 0; i < images.size(); ++i) {
      EXPECT_EQ(images[i].label, i % 2 ? Label::fake : Label::real);
      EXPECT_TRUE(ids.insert(images[i].id()).second) << images[i].id();
    }
  }
}

TEST(SynthData, DefaultDatasetOnDisk) {
  const fs::path dir = temp_dir("dataset");
  const DatasetManifest m;
  build_dataset(m, dir);
  std::size_t images = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) images += e.path().extension() == ".ppm";
  EXPECT_EQ(images, 280u);
  EXPECT_EQ(read_manifest(dir), m);
  const auto loaded = load_split(dir, Split::test);
  const auto generated = generate_split(m, Split::test);
  ASSERT_EQ(loaded.size(), generated.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].pixels, generated[i].pixels);
    EXPECT_EQ(loaded[i].label, generated[i].label);
  }
  fs::remove_all(dir);
}

TEST(ImageIo, PpmRoundTripIsExactOnTheGrid) {
  const Tensor img = generate_fake(3).pixels;
  EXPECT_EQ(decode_ppm(encode_ppm(img)), img);
  const std::string bytes = encode_ppm(img);
  EXPECT_EQ(bytes.rfind("P6\n32 32\n255\n", 0), 0u);
  EXPECT_EQ(bytes.size(), std::string("P6\n32 32\n255\n").size() + 3 * 32 * 32);
}

TEST(ImageIo, QuantizeAndErrors) {
  EXPECT_EQ(quantize(-0.5), 0);
  EXPECT_EQ(quantize(2.0), 255);
  EXPECT_EQ(quantize(0.5), 128);
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n0 0 0"), Error);
  EXPECT_THROW(decode_ppm("P6\n2 2\n255\n\x01"), Error);
  EXPECT_THROW(read_ppm("/nonexistent/x.ppm"), Error);
}

TEST(ImageIo, DisplayNormalization) {
  const Tensor r({1, 1, 3}, {-1.0, 0.0, 3.0});
  const Tensor n = normalize_for_display(r);
  EXPECT_DOUBLE_EQ(n[0], 0.0);
  EXPECT_DOUBLE_EQ(n[1], 0.25);
  EXPECT_DOUBLE_EQ(n[2], 1.0);
  const Tensor flat = normalize_for_display(Tensor({1, 2, 2}, 0.3));
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace kra
