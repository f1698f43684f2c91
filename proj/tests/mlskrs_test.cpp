#include <gtest/gtest.h>

#include <algorithm>

#include "kra/error.hpp"
#include "kra/mlskrs.hpp"
#include "support.hpp"

namespace kra {
namespace {

using testing::random_tensor;

struct Case {
  Detector detector;
  Tensor image;
  std::vector<std::string> layers;
};

// Random detector (architecture, weights) and random image per case.
Case random_case(Rng& rng) {
  const auto ids = architecture_ids();
  const std::string id = ids[rng.below(ids.size())];
  Case c{Detector::initialize(find_architecture(id), rng.next_u64()), Tensor(), {}};
  const std::uint64_t seed = rng.below(100000);
  c.image = rng.uniform() < 0.5 ? generate_real(seed).pixels : generate_fake(seed).pixels;
  c.layers = c.detector.tap_names();
  return c;
}

constexpr int kCases = 100;

TEST(Normalization, Examples) {
  bool degenerate = true;
  const Tensor n = normalize_min_max(Tensor({1, 3}, {2.0, 4.0, 3.0}), &degenerate);
  EXPECT_FALSE(degenerate);
  EXPECT_EQ(n, Tensor({1, 3}, {0.0, 1.0, 0.5}));
  const Tensor flat = normalize_min_max(Tensor({2, 2}, 7.0), &degenerate);
  EXPECT_TRUE(degenerate);
  EXPECT_EQ(flat, Tensor({2, 2}, 0.0));
}

TEST(Upsampling, BilinearAndNearest) {
  const Tensor m({2, 2}, {0.0, 1.0, 2.0, 3.0});
  const Tensor b = upsample_bilinear(m, 4, 4);
  // Half-pixel centres: output column 1 samples source x = 0.25.
  EXPECT_DOUBLE_EQ(b[0], 0.0);
  EXPECT_DOUBLE_EQ(b[1], 0.25);
  EXPECT_DOUBLE_EQ(b[5], 0.75);
  EXPECT_DOUBLE_EQ(b[15], 3.0);
  const Tensor c = upsample_bilinear(Tensor({3, 3}, 0.4), 7, 5);
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 0.4);
  const Tensor n = upsample_nearest(m, 4, 4);
  EXPECT_EQ(n, Tensor({4, 4}, {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3}));
  EXPECT_THROW(upsample_bilinear(Tensor({2}), 4, 4), Error);
}

TEST(Threshold, StrictInequality) {
  LayerSaliency s;
  s.layer = "conv1";
  s.normalized = Tensor({1, 3}, {0.2, 0.5, 0.9});
  EXPECT_EQ(threshold_mask(s, 0.5).count(), 1u);
  EXPECT_EQ(threshold_mask(s, 0.0).count(), 3u);
  EXPECT_EQ(threshold_mask(s, 1.0).count(), 0u);
  EXPECT_THROW(threshold_mask(s, 1.5), Error);
  EXPECT_THROW(select_key_region(std::span<const LayerSaliency>{}, 0.5), Error);
}

TEST(Masks, ApplyAndSetAlgebra) {
  KeyRegionMask m(2, 2);
  m.set(0, 1);
  const Tensor r({3, 2, 2}, 1.0);
  const Tensor out = apply_mask(r, m);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(out.at(c, 0, 1), 1.0);
    EXPECT_EQ(out.at(c, 0, 0) + out.at(c, 1, 0) + out.at(c, 1, 1), 0.0);
  }
  KeyRegionMask full(2, 2, true);
  EXPECT_TRUE(m.subset_of(full));
  EXPECT_FALSE(full.subset_of(m));
  KeyRegionMask both = full;
  both &= m;
  EXPECT_EQ(both, m);
  EXPECT_DOUBLE_EQ(full.fraction(), 1.0);
  EXPECT_THROW(apply_mask(Tensor({3, 3, 3}), m), Error);
  EXPECT_THROW(m &= KeyRegionMask(3, 3), Error);
}

TEST(Saliency, UnknownLayer) {
  const Detector d = Detector::initialize(find_architecture("A"), 1);
  try {
    layer_saliency(d, generate_real(1).pixels, "conv9");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::unknown_tap);
  }
}

// Property: lowering the threshold never removes pixels.
TEST(MlskrsProperty, ThresholdMonotonicity) {
  Rng rng(101);
  for (int i = 0; i < kCases; ++i) {
    const Case c = random_case(rng);
    const auto sal = layer_saliencies(c.detector, c.image, c.layers);
    double hi = rng.uniform(), lo = rng.uniform();
    if (lo > hi) std::swap(lo, hi);
    EXPECT_TRUE(select_key_region(sal, hi).subset_of(select_key_region(sal, lo))) << "case " << i;
  }
}

// Property: the multi-layer mask is contained in every single-layer mask.
TEST(MlskrsProperty, ProductIsSubsetOfEachLayer) {
  Rng rng(102);
  for (int i = 0; i < kCases; ++i) {
    const Case c = random_case(rng);
    const auto sal = layer_saliencies(c.detector, c.image, c.layers);
    const double t = rng.uniform();
    const KeyRegionMask product = select_key_region(sal, t);
    for (const auto& s : sal) EXPECT_TRUE(product.subset_of(threshold_mask(s, t))) << "case " << i;
  }
}

// Property: normalized maps lie in [0, 1] at image resolution and span it
// exactly unless degenerate.
TEST(MlskrsProperty, NormalizedMapsInUnitInterval) {
  Rng rng(103);
  for (int i = 0; i < kCases; ++i) {
    const Case c = random_case(rng);
    for (const auto& s : layer_saliencies(c.detector, c.image, c.layers)) {
      ASSERT_EQ(s.normalized.shape(), (Shape{32, 32}));
      const auto [lo, hi] = std::minmax_element(s.normalized.data().begin(), s.normalized.data().end());
      EXPECT_GE(*lo, 0.0);
      EXPECT_LE(*hi, 1.0);
      if (!s.degenerate) {
        EXPECT_EQ(*lo, 0.0);
        EXPECT_EQ(*hi, 1.0);
      }
    }
  }
}

// Property: a constant saliency map, from whatever source, yields an all-zero
// normalized map and an empty mask at every threshold.
TEST(MlskrsProperty, DegenerateMaps) {
  Rng rng(104);
  for (int i = 0; i < kCases; ++i) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
    bool degenerate = false;
    const Tensor n = normalize_min_max(Tensor({h, w}, rng.uniform(-5, 5)), &degenerate);
    EXPECT_TRUE(degenerate);
    LayerSaliency s;
    s.layer = "x";
    s.degenerate = true;
    s.normalized = upsample_bilinear(n, 32, 32);
    EXPECT_TRUE(threshold_mask(s, rng.uniform()).empty());
    EXPECT_TRUE(threshold_mask(s, 0.0).empty());
  }
  // A detector with zero conv weights has constant activations everywhere.
  const Architecture& arch = find_architecture("A");
  std::vector<Tensor> params;
  for (const auto& shape : arch.parameter_shapes()) params.emplace_back(shape, 0.1);
  for (std::size_t i = 0; i < 6; i += 2) params[i].fill(0.0);
  const Detector flat(arch, params);
  for (const auto& s : layer_saliencies(flat, generate_fake(1).pixels, flat.tap_names())) {
    EXPECT_TRUE(s.degenerate) << s.layer;
    EXPECT_TRUE(threshold_mask(s, 0.0).empty());
  }
}

// Property: multiplying the logit by c > 0 (dense weights and bias scaled)
// keeps the predicted class, the normalized maps and every mask.
TEST(MlskrsProperty, PositiveLogitScaleInvariance) {
  Rng rng(105);
  for (int i = 0; i < kCases; ++i) {
    const Case c = random_case(rng);
    auto params = c.detector.parameters();
    const double k = std::exp(rng.uniform(-3.0, 3.0));
    for (std::size_t p = params.size() - 2; p < params.size(); ++p) params[p] = k * params[p];
    const Detector scaled(c.detector.architecture(), params);
    EXPECT_EQ(scaled.predict(c.image).label, c.detector.predict(c.image).label);
    const auto a = layer_saliencies(c.detector, c.image, c.layers);
    const auto b = layer_saliencies(scaled, c.image, c.layers);
    const double t = rng.uniform();
    for (std::size_t l = 0; l < a.size(); ++l) {
      for (std::size_t j = 0; j < a[l].normalized.size(); ++j) {
        ASSERT_NEAR(a[l].normalized[j], b[l].normalized[j], 1e-9) << "case " << i;
      }
    }
    // Entries within rounding of t could land on either side; compare the
    // masks only away from the threshold.
    const KeyRegionMask ma = select_key_region(a, t), mb = select_key_region(b, t);
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 32; ++x) {
        bool near = false;
        for (const auto& s : a) near = near || std::abs(s.normalized[y * 32 + x] - t) < 1e-9;
        if (!near) {
          EXPECT_EQ(ma.test(y, x), mb.test(y, x)) << "case " << i;
        }
      }
    }
  }
}

TEST(Saliency, ObjectivesAndOptions) {
  const Detector& d = testing::trained_detector("A");
  const Tensor x = generate_fake(4242).pixels;
  SaliencyOptions logit, loss;
  loss.objective = SaliencyObjective::loss;
  const auto sl = layer_saliency(d, x, "conv2", logit);
  const auto sc = layer_saliency(d, x, "conv2", loss);
  // The loss objective descends where the logit objective ascends: raw maps
  // have opposite signs everywhere.
  for (std::size_t i = 0; i < sl.raw.size(); ++i) EXPECT_LE(sl.raw[i] * sc.raw[i], 0.0);
  SaliencyOptions abs;
  abs.absolute = true;
  for (double v : layer_saliency(d, x, "conv2", abs).raw.data()) EXPECT_GE(v, 0.0);
  SaliencyOptions nearest;
  nearest.upsampling = Upsampling::nearest;
  EXPECT_EQ(layer_saliency(d, x, "conv1", nearest).normalized.shape(), (Shape{32, 32}));
}

}  // namespace
}  // namespace kra
