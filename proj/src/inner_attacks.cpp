#include "kra/inner_attacks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kra/error.hpp"

namespace kra {
namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

bool all_zero(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

// Ascent direction of BCE(sigmoid(z), away_from): d/dz = sigmoid(z) - y,
// which is negative for y = fake and positive for y = real.
Tensor loss_ascent_direction(const Classifier& model, const Tensor& image, Label away_from) {
  LogitGradient lg = model.logit_gradient(image);
  if (away_from == Label::fake) {
    for (double& v : lg.gradient.data()) v = -v;
  }
  return std::move(lg.gradient);
}

void require_positive(double v, const char* what) {
  if (!(v > 0.0)) throw Error(ErrorCode::invalid_argument, std::string(what) + " must be > 0");
}

struct Start {
  Label away;
  bool already_flipped;
};

Start resolve_away(const Classifier& model, const Tensor& image, std::optional<Label> away_from) {
  const Label now = model.predict(image).label;
  const Label away = away_from.value_or(now);
  return {away, now != away};
}

}  // namespace

Tensor clip_box(const Tensor& image, const Tensor& r) {
  require_same_shape(image, r, "clip_box");
  Tensor out = r;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = image[i];
    double& d = out[i];
    if (x + d > 1.0) {
      d = 1.0 - x;
      while (x + d > 1.0) d = std::nextafter(d, -1.0);
    } else if (x + d < 0.0) {
      d = -x;
      while (x + d < 0.0) d = std::nextafter(d, 1.0);
    }
  }
  return out;
}

const char* to_string(AttackFlag flag) {
  switch (flag) {
    case AttackFlag::none: return "none";
    case AttackFlag::zero_gradient: return "zero_gradient";
    case AttackFlag::no_convergence: return "no_convergence";
    case AttackFlag::already_flipped: return "already_flipped";
  }
  return "?";
}

Perturbation fgsm(const Classifier& model, const Tensor& image, const FgsmParams& params,
                  std::optional<Label> away_from) {
  require_positive(params.epsilon, "fgsm epsilon");
  const Start start = resolve_away(model, image, away_from);
  if (start.already_flipped) return {Tensor(image.shape()), AttackFlag::already_flipped};
  const Tensor dir = loss_ascent_direction(model, image, start.away);
  if (all_zero(dir)) return {Tensor(image.shape()), AttackFlag::zero_gradient};
  Tensor r(image.shape());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = params.epsilon * sign(dir[i]);
  return {clip_box(image, r), AttackFlag::none};
}

Perturbation pgd(const Classifier& model, const Tensor& image, const PgdParams& params,
                 std::optional<Label> away_from) {
  require_positive(params.epsilon, "pgd epsilon");
  require_positive(params.step, "pgd step");
  if (params.steps < 1) throw Error(ErrorCode::invalid_argument, "pgd needs at least one step");
  const Start start = resolve_away(model, image, away_from);
  if (start.already_flipped) return {Tensor(image.shape()), AttackFlag::already_flipped};

  Tensor r(image.shape());
  for (std::size_t s = 0; s < params.steps; ++s) {
    const Tensor dir = loss_ascent_direction(model, image + r, start.away);
    if (all_zero(dir)) {
      return {std::move(r), s == 0 ? AttackFlag::zero_gradient : AttackFlag::none};
    }
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] = std::clamp(r[i] + params.step * sign(dir[i]), -params.epsilon, params.epsilon);
    }
    r = clip_box(image, r);
  }
  return {std::move(r), AttackFlag::none};
}

Perturbation deepfool(const Classifier& model, const Tensor& image,
                      const DeepFoolParams& params, std::optional<Label> away_from) {
  if (!(params.overshoot >= 0.0)) {
    throw Error(ErrorCode::invalid_argument, "deepfool overshoot must be >= 0");
  }
  const Start start = resolve_away(model, image, away_from);
  if (start.already_flipped) return {Tensor(image.shape()), AttackFlag::already_flipped};

  const double scale = 1.0 + params.overshoot;
  Tensor total(image.shape());
  Tensor candidate(image.shape());
  for (std::size_t step = 0; step < params.max_steps; ++step) {
    const LogitGradient lg = model.logit_gradient(image + candidate);
    if (label_for_logit(lg.logit) != start.away) return {candidate, AttackFlag::none};
    const double norm2 = dot(lg.gradient, lg.gradient);
    if (norm2 == 0.0) return {candidate, AttackFlag::zero_gradient};
    const double k = -lg.logit / norm2;
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += k * lg.gradient[i];
    candidate = clip_box(image, scale * total);
  }
  const bool crossed = model.predict(image + candidate).label != start.away;
  return {candidate, crossed ? AttackFlag::none : AttackFlag::no_convergence};
}

InnerAttack InnerAttack::fgsm(FgsmParams params) {
  std::ostringstream d;
  d << "fgsm(epsilon=" << params.epsilon << ")";
  return InnerAttack("fgsm", d.str(),
                     [params](const Classifier& m, const Tensor& x, std::optional<Label> away) {
                       return kra::fgsm(m, x, params, away);
                     });
}

InnerAttack InnerAttack::pgd(PgdParams params) {
  std::ostringstream d;
  d << "pgd(epsilon=" << params.epsilon << ",step=" << params.step
    << ",steps=" << params.steps << ")";
  return InnerAttack("pgd", d.str(),
                     [params](const Classifier& m, const Tensor& x, std::optional<Label> away) {
                       return kra::pgd(m, x, params, away);
                     });
}

InnerAttack InnerAttack::deepfool(DeepFoolParams params) {
  std::ostringstream d;
  d << "deepfool(overshoot=" << params.overshoot << ",max_steps=" << params.max_steps << ")";
  return InnerAttack("deepfool", d.str(),
                     [params](const Classifier& m, const Tensor& x, std::optional<Label> away) {
                       return kra::deepfool(m, x, params, away);
                     });
}

InnerAttack InnerAttack::custom(std::string name, Fn fn) {
  if (!fn) throw Error(ErrorCode::invalid_argument, "custom attack needs a callable");
  std::string description = name;
  return InnerAttack(std::move(name), std::move(description), std::move(fn));
}

InnerAttack InnerAttack::by_name(const std::string& name, const FgsmParams& fgsm_params,
                                 const PgdParams& pgd_params,
                                 const DeepFoolParams& deepfool_params) {
  if (name == "fgsm") return fgsm(fgsm_params);
  if (name == "pgd") return pgd(pgd_params);
  if (name == "deepfool") return deepfool(deepfool_params);
  throw Error(ErrorCode::invalid_argument, "unknown inner attack '" + name + "'");
}

}  // namespace kra
