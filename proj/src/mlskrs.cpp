#include "kra/mlskrs.hpp"

#include <algorithm>
#include <cmath>

#include "kra/error.hpp"

namespace kra {

KeyRegionMask::KeyRegionMask(std::size_t height, std::size_t width, bool value)
    : height_(height), width_(width), bits_(height * width, value ? 1 : 0) {}

std::size_t KeyRegionMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

double KeyRegionMask::fraction() const noexcept {
  return bits_.empty() ? 0.0
                       : static_cast<double>(count()) / static_cast<double>(bits_.size());
}

void KeyRegionMask::require_same_extent(const KeyRegionMask& other) const {
  if (height_ != other.height_ || width_ != other.width_) {
    throw Error(ErrorCode::shape_mismatch, "masks of different extent");
  }
}

bool KeyRegionMask::subset_of(const KeyRegionMask& other) const {
  require_same_extent(other);
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i] && !other.bits_[i]) return false;
  }
  return true;
}

KeyRegionMask& KeyRegionMask::operator&=(const KeyRegionMask& other) {
  require_same_extent(other);
  for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] &= other.bits_[i];
  return *this;
}

KeyRegionMask& KeyRegionMask::operator|=(const KeyRegionMask& other) {
  require_same_extent(other);
  for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] |= other.bits_[i];
  return *this;
}

Tensor normalize_min_max(const Tensor& map, bool* degenerate) {
  Tensor out(map.shape());
  bool flat = true;
  if (!map.empty()) {
    const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
    const double range = *hi - *lo;
    flat = !(range > 0.0);
    if (!flat) {
      for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - *lo) / range;
    }
  }
  if (degenerate) *degenerate = flat;
  return out;
}

namespace {

void require_map(const Tensor& map) {
  if (map.rank() != 2 || map.empty()) {
    throw Error(ErrorCode::shape_mismatch,
                "saliency maps are h x w, got " + shape_string(map.shape()));
  }
}

double source_coord(std::size_t dst, std::size_t in, std::size_t out) {
  const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                       static_cast<double>(out) - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(in - 1));
}

}  // namespace

Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width) {
  require_map(map);
  const std::size_t h = map.dim(0), w = map.dim(1);
  Tensor out({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = source_coord(y, h, height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = source_coord(x, w, width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = map[y0 * w + x0] * (1 - fx) + map[y0 * w + x1] * fx;
      const double bottom = map[y1 * w + x0] * (1 - fx) + map[y1 * w + x1] * fx;
      out[y * width + x] = top * (1 - fy) + bottom * fy;
    }
  }
  return out;
}

Tensor upsample_nearest(const Tensor& map, std::size_t height, std::size_t width) {
  require_map(map);
  const std::size_t h = map.dim(0), w = map.dim(1);
  Tensor out({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * h / height;
    for (std::size_t x = 0; x < width; ++x) out[y * width + x] = map[sy * w + x * w / width];
  }
  return out;
}

std::vector<LayerSaliency> layer_saliencies(const Detector& detector, const Tensor& image,
                                            std::span<const std::string> layers,
                                            const SaliencyOptions& options) {
  if (image.shape() != detector.input_shape()) {
    throw Error(ErrorCode::shape_mismatch,
                "image " + shape_string(image.shape()) + " does not fit detector input " +
                    shape_string(detector.input_shape()));
  }
  Shape batch_shape{1};
  batch_shape.insert(batch_shape.end(), image.shape().begin(), image.shape().end());

  Tape tape;
  const auto g = detector.build(tape, image.reshaped(batch_shape));
  for (const auto& name : layers) {
    if (!tape.has_tap(name)) {
      throw Error(ErrorCode::unknown_tap, "detector '" + detector.architecture().id +
                                              "' has no layer '" + name + "'");
    }
  }

  const double z = tape.value(g.logit)[0];
  const bool fake = label_for_logit(z) == Label::fake;
  Var objective;
  switch (options.objective) {
    case SaliencyObjective::logit:
      objective = tape.scale(g.logit, fake ? 1.0 : -1.0);
      break;
    case SaliencyObjective::probability:
      objective = tape.scale(tape.sigmoid(g.logit), fake ? 1.0 : -1.0);
      break;
    case SaliencyObjective::loss:
      objective = tape.bce_with_logits(g.logit, Tensor({1, 1}, fake ? 1.0 : 0.0));
      break;
  }
  const auto grads = tape.backward_with_taps(objective, layers);

  const std::size_t height = image.dim(1), width = image.dim(2);
  std::vector<LayerSaliency> out;
  for (const auto& name : layers) {
    const Tensor& gr = grads.at(name);  // 1 x k x h x w
    const std::size_t k = gr.dim(1), h = gr.dim(2), w = gr.dim(3);
    LayerSaliency s;
    s.layer = name;
    s.raw = Tensor({h, w});
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i = 0; i < h * w; ++i) {
        const double v = gr[c * h * w + i];
        s.raw[i] += options.absolute ? std::abs(v) : v;
      }
    }
    const Tensor unit = normalize_min_max(s.raw, &s.degenerate);
    if (s.degenerate) {
      s.normalized = Tensor({height, width});
    } else {
      const Tensor up = options.upsampling == Upsampling::bilinear
                            ? upsample_bilinear(unit, height, width)
                            : upsample_nearest(unit, height, width);
      s.normalized = normalize_min_max(up);
    }
    out.push_back(std::move(s));
  }
  return out;
}

LayerSaliency layer_saliency(const Detector& detector, const Tensor& image,
                             const std::string& layer, const SaliencyOptions& options) {
  return std::move(layer_saliencies(detector, image, std::span(&layer, 1), options).front());
}

KeyRegionMask threshold_mask(const LayerSaliency& saliency, double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "threshold must lie in [0, 1]");
  }
  const Tensor& g = saliency.normalized;
  require_map(g);
  KeyRegionMask mask(g.dim(0), g.dim(1));
  for (std::size_t y = 0; y < g.dim(0); ++y) {
    for (std::size_t x = 0; x < g.dim(1); ++x) mask.set(y, x, g[y * g.dim(1) + x] > t);
  }
  mask.threshold = t;
  mask.layers = {saliency.layer};
  return mask;
}

KeyRegionMask select_key_region(std::span<const LayerSaliency> saliencies, double t) {
  if (saliencies.empty()) {
    throw Error(ErrorCode::invalid_argument, "key region selection needs at least one layer");
  }
  KeyRegionMask mask = threshold_mask(saliencies.front(), t);
  for (const auto& s : saliencies.subspan(1)) {
    mask &= threshold_mask(s, t);
    mask.layers.push_back(s.layer);
  }
  return mask;
}

KeyRegionMask select_key_region(const Detector& detector, const Tensor& image,
                                std::span<const std::string> layers, double t,
                                const SaliencyOptions& options) {
  if (layers.empty()) {
    throw Error(ErrorCode::invalid_argument, "key region selection needs at least one layer");
  }
  const auto saliencies = layer_saliencies(detector, image, layers, options);
  return select_key_region(saliencies, t);
}

Tensor apply_mask(const Tensor& r, const KeyRegionMask& mask) {
  if (r.rank() != 3 || r.dim(1) != mask.height() || r.dim(2) != mask.width()) {
    throw Error(ErrorCode::shape_mismatch, "mask does not fit perturbation " +
                                               shape_string(r.shape()));
  }
  Tensor out = r;
  const std::size_t plane = mask.height() * mask.width();
  for (std::size_t c = 0; c < r.dim(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask.bits()[i]) out[c * plane + i] = 0.0;
    }
  }
  return out;
}

}  // namespace kra
