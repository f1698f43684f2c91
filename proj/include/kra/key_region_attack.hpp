#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kra/detector.hpp"
#include "kra/inner_attacks.hpp"
#include "kra/mlskrs.hpp"

namespace kra {

struct KraConfig {
  double t_alpha = 0.8;  // initial threshold
  double t_prime = 0.1;  // threshold floor
  double beta = 0.1;     // threshold decrement per iteration
  std::vector<std::string> layers;  // empty: every tap of the detector
  InnerAttack inner = InnerAttack::pgd();
  std::size_t u_max = 100;
  // Recompute the key region on x + r' each iteration instead of on x.
  bool recompute_mask_on_candidate = false;
  SaliencyOptions saliency;

  void validate() const;
};

enum class AttackStatus {
  success,
  exhausted,            // u_max iterations without a flip
  empty_mask_at_floor,  // key region empty with the threshold at its floor
};

const char* to_string(AttackStatus status);

struct AttackOutcome {
  bool success = false;
  AttackStatus status = AttackStatus::exhausted;
  Tensor r_final;
  std::size_t iterations = 0;
  std::vector<double> thresholds;         // t_u of every executed iteration
  std::vector<std::size_t> mask_sizes;    // |M_u| of every executed iteration
  std::vector<AttackFlag> inner_flags;    // flag of every inner-attack call
  KeyRegionMask mask_union;               // union of all M_u
  std::vector<KeyRegionMask> masks;       // each M_u, only if requested
  Label clean_label = Label::real;
  Label final_label = Label::real;
  double seconds = 0.0;
};

// Iterative masked attack:
//   M_u  = key region at threshold t_u (on x, or x + r'_{u-1} if configured)
//   r_u  = inner(x + r'_{u-1})
//   r'_u = clip_box(x, r'_{u-1} + r_u * M_u)
// stopping when the prediction on x + r'_u differs from the prediction on x,
// otherwise t_{u+1} = max(t_u - beta, t_prime).
AttackOutcome attack(const Detector& detector, const Tensor& image, const KraConfig& config,
                     bool record_masks = false);

// Baseline: a single call of the inner attack over the whole image.
AttackOutcome attack_unmasked(const Classifier& model, const Tensor& image,
                              const InnerAttack& inner);

}  // namespace kra
