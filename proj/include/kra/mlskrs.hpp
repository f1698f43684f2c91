#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kra/detector.hpp"
#include "kra/tensor.hpp"

namespace kra {

// Which scalar of the detector output is differentiated w.r.t. the conv
// activations. logit and probability grow with confidence in the predicted
// class; loss is the cross-entropy against it and so points the other way.
// Min-max normalization is not sign-symmetric, so the choice matters.
enum class SaliencyObjective {
  logit,        // z when predicted fake, -z when predicted real
  probability,  // +/- sigmoid(z), signed as for logit
  loss,         // cross-entropy against the predicted class
};

enum class Upsampling { bilinear, nearest };

struct SaliencyOptions {
  SaliencyObjective objective = SaliencyObjective::logit;
  // Sum |g| over channels instead of the signed sum.
  bool absolute = false;
  Upsampling upsampling = Upsampling::bilinear;
};

struct LayerSaliency {
  std::string layer;
  Tensor raw;         // channel-summed gradient, layer resolution (h x w)
  Tensor normalized;  // min-max normalized and upsampled, image resolution
  bool degenerate = false;  // raw map was constant; normalized is all zero
};

// Binary H x W pixel set. One mask covers every colour channel.
class KeyRegionMask {
 public:
  KeyRegionMask() = default;
  KeyRegionMask(std::size_t height, std::size_t width, bool value = false);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  bool test(std::size_t y, std::size_t x) const { return bits_[y * width_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on = true) { bits_[y * width_ + x] = on; }
  std::size_t count() const noexcept;
  double fraction() const noexcept;
  bool empty() const noexcept { return count() == 0; }

  bool subset_of(const KeyRegionMask& other) const;
  KeyRegionMask& operator&=(const KeyRegionMask& other);
  KeyRegionMask& operator|=(const KeyRegionMask& other);
  bool operator==(const KeyRegionMask& other) const { return bits_ == other.bits_ && height_ == other.height_; }

  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  double threshold = 0.0;
  std::vector<std::string> layers;

 private:
  void require_same_extent(const KeyRegionMask& other) const;

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

// (G - min G) / (max G - min G); all zeros when max == min.
Tensor normalize_min_max(const Tensor& map, bool* degenerate = nullptr);
// Half-pixel-centre bilinear resampling of an h x w map.
Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width);
Tensor upsample_nearest(const Tensor& map, std::size_t height, std::size_t width);

// Channel-gradient saliency of each listed tap, from a single backward pass.
// The upsampled map is re-stretched to span exactly [0, 1], because
// interpolation does not in general land on the layer's extreme values.
std::vector<LayerSaliency> layer_saliencies(const Detector& detector,
                                            const Tensor& image,
                                            std::span<const std::string> layers,
                                            const SaliencyOptions& options = {});
LayerSaliency layer_saliency(const Detector& detector, const Tensor& image,
                             const std::string& layer,
                             const SaliencyOptions& options = {});

// Bit set iff the normalized saliency is strictly greater than t.
KeyRegionMask threshold_mask(const LayerSaliency& saliency, double t);

// Pixelwise product (logical AND) of the per-layer masks at threshold t.
KeyRegionMask select_key_region(std::span<const LayerSaliency> saliencies, double t);
KeyRegionMask select_key_region(const Detector& detector, const Tensor& image,
                                std::span<const std::string> layers, double t,
                                const SaliencyOptions& options = {});

// r * M, the mask broadcast across channels. r is C x H x W.
Tensor apply_mask(const Tensor& r, const KeyRegionMask& mask);

}  // namespace kra
