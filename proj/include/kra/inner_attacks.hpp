#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>

#include "kra/detector.hpp"
#include "kra/tensor.hpp"

namespace kra {

// Smallest change to r so that image + r lies in [0,1] elementwise. Entries
// already in range are returned untouched, so the operation is idempotent.
Tensor clip_box(const Tensor& image, const Tensor& r);

struct FgsmParams {
  double epsilon = 0.03;
};

struct PgdParams {
  double epsilon = 0.03;
  double step = 0.007;
  std::size_t steps = 10;
};

struct DeepFoolParams {
  double overshoot = 0.02;
  std::size_t max_steps = 50;
};

enum class AttackFlag {
  none,
  zero_gradient,    // input gradient vanished; r is zero (or best so far)
  no_convergence,   // deepfool hit max_steps without crossing
  already_flipped,  // input already predicted differently from away_from
};

const char* to_string(AttackFlag flag);

struct Perturbation {
  Tensor r;  // same shape as the image, image + r in [0,1]
  AttackFlag flag = AttackFlag::none;
};

// Each attack pushes the prediction away from `away_from` (default: the
// classifier's prediction on `image`) by ascending the cross-entropy of that
// label. Only the sign of that gradient is used by fgsm/pgd, which keeps the
// direction exact even when the sigmoid saturates.
Perturbation fgsm(const Classifier& model, const Tensor& image, const FgsmParams& params,
                  std::optional<Label> away_from = {});
Perturbation pgd(const Classifier& model, const Tensor& image, const PgdParams& params,
                 std::optional<Label> away_from = {});
// Binary DeepFool: r <- r - (z / |grad z|^2) grad z, evaluated at
// x + (1 + overshoot) r, until the label flips; returns (1 + overshoot) r.
Perturbation deepfool(const Classifier& model, const Tensor& image,
                      const DeepFoolParams& params, std::optional<Label> away_from = {});

// A pluggable perturbation generator: one of the built-in methods or any
// user-supplied callable with the same contract.
class InnerAttack {
 public:
  using Fn = std::function<Perturbation(const Classifier&, const Tensor&, std::optional<Label>)>;

  static InnerAttack fgsm(FgsmParams params = {});
  static InnerAttack pgd(PgdParams params = {});
  static InnerAttack deepfool(DeepFoolParams params = {});
  static InnerAttack custom(std::string name, Fn fn);

  // "fgsm", "pgd" or "deepfool" with the given parameters.
  static InnerAttack by_name(const std::string& name, const FgsmParams& fgsm,
                             const PgdParams& pgd, const DeepFoolParams& deepfool);

  const std::string& name() const noexcept { return name_; }
  // Human-readable parameter list, e.g. "pgd(epsilon=0.03,step=0.007,steps=10)".
  const std::string& description() const noexcept { return description_; }

  Perturbation operator()(const Classifier& model, const Tensor& image,
                          std::optional<Label> away_from = {}) const {
    return fn_(model, image, away_from);
  }

 private:
  InnerAttack(std::string name, std::string description, Fn fn)
      : name_(std::move(name)), description_(std::move(description)), fn_(std::move(fn)) {}

  std::string name_;
  std::string description_;
  Fn fn_;
};

}  // namespace kra
