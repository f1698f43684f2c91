#include "kra/key_region_attack.hpp"

#include <chrono>

#include "kra/error.hpp"

namespace kra {
namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

void KraConfig::validate() const {
  if (!(0.0 <= t_prime && t_prime <= t_alpha && t_alpha <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "thresholds must satisfy 0 <= t' <= t_alpha <= 1");
  }
  if (!(beta > 0.0)) throw Error(ErrorCode::invalid_argument, "beta must be > 0");
  if (u_max < 1) throw Error(ErrorCode::invalid_argument, "u_max must be >= 1");
}

const char* to_string(AttackStatus status) {
  switch (status) {
    case AttackStatus::success: return "success";
    case AttackStatus::exhausted: return "exhausted";
    case AttackStatus::empty_mask_at_floor: return "empty_mask_at_floor";
  }
  return "?";
}

AttackOutcome attack(const Detector& detector, const Tensor& image, const KraConfig& config,
                     bool record_masks) {
  config.validate();
  const Stopwatch clock;
  const std::vector<std::string> layers =
      config.layers.empty() ? detector.tap_names() : config.layers;

  AttackOutcome out;
  out.clean_label = detector.predict(image).label;
  out.final_label = out.clean_label;
  out.r_final = Tensor(image.shape());
  out.mask_union = KeyRegionMask(image.dim(1), image.dim(2));

  // With the mask taken on x the saliency maps never change, so one backward
  // pass serves every iteration.
  std::vector<LayerSaliency> fixed;
  if (!config.recompute_mask_on_candidate) {
    fixed = layer_saliencies(detector, image, layers, config.saliency);
  }

  double t = config.t_alpha;
  for (std::size_t u = 0; u < config.u_max; ++u) {
    const Tensor candidate = image + out.r_final;
    const KeyRegionMask mask =
        config.recompute_mask_on_candidate
            ? select_key_region(detector, candidate, layers, t, config.saliency)
            : select_key_region(fixed, t);

    const Perturbation step = config.inner(detector, candidate, out.clean_label);
    out.r_final = clip_box(image, out.r_final + apply_mask(step.r, mask));

    out.iterations = u + 1;
    out.thresholds.push_back(t);
    out.mask_sizes.push_back(mask.count());
    out.inner_flags.push_back(step.flag);
    out.mask_union |= mask;
    if (record_masks) out.masks.push_back(mask);

    out.final_label = detector.predict(image + out.r_final).label;
    if (out.final_label != out.clean_label) {
      out.success = true;
      out.status = AttackStatus::success;
      break;
    }
    if (mask.empty() && t == config.t_prime) {
      out.status = AttackStatus::empty_mask_at_floor;
      break;
    }
    t = std::max(t - config.beta, config.t_prime);
  }
  out.seconds = clock.seconds();
  return out;
}

AttackOutcome attack_unmasked(const Classifier& model, const Tensor& image,
                              const InnerAttack& inner) {
  const Stopwatch clock;
  AttackOutcome out;
  out.clean_label = model.predict(image).label;
  const Perturbation step = inner(model, image, out.clean_label);
  out.r_final = clip_box(image, step.r);
  out.iterations = 1;
  out.inner_flags.push_back(step.flag);
  out.mask_union = KeyRegionMask(image.dim(1), image.dim(2), true);
  out.mask_sizes.push_back(out.mask_union.count());
  out.final_label = model.predict(image + out.r_final).label;
  out.success = out.final_label != out.clean_label;
  out.status = out.success ? AttackStatus::success : AttackStatus::exhausted;
  out.seconds = clock.seconds();
  return out;
}

}  // namespace kra
