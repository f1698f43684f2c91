// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Trains the three registry detectors on the default
// training split and attacks a 200-image test split (100 per class).

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kra/harness.hpp"
#include "kra/inner_attacks.hpp"
#include "kra/key_region_attack.hpp"
#include "kra/mlskrs.hpp"
#include "kra/rng.hpp"
#include "kra/synth_data.hpp"

namespace {

using namespace kra;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  failures += !pass;
  std::printf("criterion %2d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
}

// ---- fixtures ---------------------------------------------------------------

struct Fixture {
  DatasetManifest manifest;
  std::vector<LabeledImage> test;
  std::map<std::string, Detector> detectors;
};

Fixture build_fixture() {
  Fixture f;
  f.manifest.test = 100;
  const auto train_set = generate_split(f.manifest, Split::train);
  const auto val_set = generate_split(f.manifest, Split::val);
  f.test = generate_split(f.manifest, Split::test);
  for (const auto& id : architecture_ids()) {
    const auto start = Clock::now();
    Detector d = Detector::initialize(find_architecture(id), 1);
    const TrainHistory h = train(d, train_set, val_set, TrainConfig{});
    std::printf("# trained %s in %.1f s: val_acc=%.3f test_acc=%.3f\n", id.c_str(), since(start),
                h.epochs.back().val_acc.value_or(0.0), accuracy(d, f.test));
    f.detectors.emplace(id, std::move(d));
  }
  return f;
}

double mean_of(const std::vector<ImageResult>& results, double ImageResult::*field) {
  double s = 0.0;
  for (const auto& r : results) s += r.*field;
  return results.empty() ? 0.0 : s / static_cast<double>(results.size());
}

// ---- 1: gradients ------------------------------------------------------------

void gradient_correctness() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::size_t probes = 0;
  std::string per_arch;
  for (const auto& id : architecture_ids()) {
    const DetectorGradcheck g = gradcheck_detector(find_architecture(id), 1, 16, 1e-5);
    worst = std::max(worst, g.max_error);
    probes += g.errors.size();
    per_arch += fmt(" %s=%.2e", id.c_str(), g.max_error);
  }
  const double secs = since(start);
  report(1, "gradient correctness", worst < 1e-4 && secs < 60.0 && probes >= 30,
         fmt("max rel error %.2e (<1e-4) over %zu probes,%s; %.1f s (<60 s)", worst, probes,
             per_arch.c_str(), secs));
}

// ---- 2: MLSKRS properties -----------------------------------------------------

void mlskrs_invariants() {
  constexpr int kCases = 100;
  Rng rng(2024);
  std::size_t monotone = 0, product = 0, range = 0, degenerate = 0, scale = 0;
  for (int i = 0; i < kCases; ++i) {
    const auto ids = architecture_ids();
    const Detector d = Detector::initialize(find_architecture(ids[rng.below(ids.size())]), rng.next_u64());
    const std::uint64_t seed = rng.below(1000000);
    const Tensor x = rng.uniform() < 0.5 ? generate_real(seed).pixels : generate_fake(seed).pixels;
    const auto sal = layer_saliencies(d, x, d.tap_names());

    double lo = rng.uniform(), hi = rng.uniform();
    if (lo > hi) std::swap(lo, hi);
    monotone += select_key_region(sal, hi).subset_of(select_key_region(sal, lo));

    const double t = rng.uniform();
    const KeyRegionMask m = select_key_region(sal, t);
    bool sub = true, in_range = true;
    for (const auto& s : sal) {
      sub = sub && m.subset_of(threshold_mask(s, t));
      const auto [mn, mx] = std::minmax_element(s.normalized.data().begin(), s.normalized.data().end());
      in_range = in_range && *mn >= 0.0 && *mx <= 1.0 && (s.degenerate || (*mn == 0.0 && *mx == 1.0));
    }
    product += sub;
    range += in_range;

    // A constant map of random size and level must give an empty mask.
    bool flat = false;
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
    LayerSaliency c;
    c.layer = "flat";
    c.normalized = upsample_bilinear(normalize_min_max(Tensor({h, w}, rng.uniform(-3, 3)), &flat), 32, 32);
    c.degenerate = flat;
    degenerate += flat && threshold_mask(c, rng.uniform()).empty() && threshold_mask(c, 0.0).empty();

    // Scaling the logit by k > 0 keeps the argmax and every mask entry that
    // is not within rounding of the threshold.
    auto params = d.parameters();
    const double k = std::exp(rng.uniform(-3.0, 3.0));
    for (std::size_t p = params.size() - 2; p < params.size(); ++p) params[p] = k * params[p];
    const Detector scaled(d.architecture(), params);
    const auto sal_k = layer_saliencies(scaled, x, scaled.tap_names());
    const KeyRegionMask mk = select_key_region(sal_k, t);
    bool same = scaled.predict(x).label == d.predict(x).label;
    for (std::size_t y = 0; y < 32 && same; ++y) {
      for (std::size_t z = 0; z < 32; ++z) {
        bool near = false;
        for (const auto& s : sal) near = near || std::abs(s.normalized[y * 32 + z] - t) < 1e-9;
        if (!near && m.test(y, z) != mk.test(y, z)) same = false;
      }
    }
    scale += same;
  }
  const std::size_t n = kCases;
  report(2, "MLSKRS invariants",
         monotone == n && product == n && range == n && degenerate == n && scale == n,
         fmt("monotonicity %zu/%zu, product-subset %zu/%zu, range %zu/%zu, degenerate %zu/%zu, "
             "logit-scale %zu/%zu",
             monotone, n, product, n, range, n, degenerate, n, scale, n));
}

// ---- 3-6: attacks on detector A --------------------------------------------------

struct Soundness {
  std::size_t checked = 0, violations = 0;
  std::string first;
};

void check_sound(const Detector& d, const Tensor& x, const KraConfig& cfg, const AttackOutcome& o,
                 const std::string& id, Soundness& s) {
  ++s.checked;
  std::vector<std::string> bad;
  const Tensor adv = x + o.r_final;
  if (o.success != (d.predict(adv).label != d.predict(x).label)) bad.push_back("flag");
  if (o.iterations > cfg.u_max) bad.push_back("u_max");
  KeyRegionMask un(x.dim(1), x.dim(2));
  for (const auto& m : o.masks) {
    for (std::size_t y = 0; y < x.dim(1); ++y) {
      for (std::size_t z = 0; z < x.dim(2); ++z) {
        if (m.test(y, z)) un.set(y, z);
      }
    }
  }
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    for (std::size_t y = 0; y < x.dim(1); ++y) {
      for (std::size_t z = 0; z < x.dim(2); ++z) {
        if (adv.at(c, y, z) < 0.0 || adv.at(c, y, z) > 1.0) bad.push_back("box");
        if (o.r_final.at(c, y, z) != 0.0 && !un.test(y, z)) bad.push_back("support");
      }
    }
  }
  if (!bad.empty()) {
    ++s.violations;
    if (s.first.empty()) s.first = id + ": " + bad.front();
  }
}

// KRA over the split with every mask recorded, packaged as harness results.
std::vector<ImageResult> run_kra(const Detector& d, const std::vector<LabeledImage>& images,
                                 const KraConfig& cfg, Soundness& sound) {
  std::vector<ImageResult> out;
  for (const auto& im : images) {
    ImageResult r;
    r.image_id = im.id();
    r.label = im.label;
    r.outcome = attack(d, im.pixels, cfg, true);
    check_sound(d, im.pixels, cfg, r.outcome, r.image_id, sound);
    r.adversarial = im.pixels + r.outcome.r_final;
    r.p_l0 = p_l0(r.outcome.r_final);
    r.p_l2 = p_l2(r.outcome.r_final);
    out.push_back(std::move(r));
  }
  return out;
}

void attacks_on_a(const Fixture& f) {
  const Detector& a = f.detectors.at("A");
  Soundness sound;

  auto start = Clock::now();
  KraConfig pgd_cfg;
  pgd_cfg.inner = InnerAttack::pgd();
  const auto kra_pgd = run_kra(a, f.test, pgd_cfg, sound);
  const double pgd_secs = since(start);
  KraConfig df_cfg;
  df_cfg.inner = InnerAttack::deepfool();
  const auto kra_df = run_kra(a, f.test, df_cfg, sound);
  report(3, "KRA soundness", sound.violations == 0 && sound.checked == 2 * f.test.size(),
         fmt("%zu violations over %zu attacked images (KRA-PGD and KRA-DeepFool, %zu each)%s",
             sound.violations, sound.checked, f.test.size(),
             sound.first.empty() ? "" : (", first: " + sound.first).c_str()));

  start = Clock::now();
  const auto plain = attack_images(a, f.test, make_attack_spec("pgd", KraConfig{}));
  const double plain_secs = since(start);
  const AttackSummary s_kra = summarize(a, f.test, kra_pgd);
  const AttackSummary s_plain = summarize(a, f.test, plain);
  const double asr_kra = std::clamp(s_kra.asr, 0.0, 1.0), asr_plain = std::clamp(s_plain.asr, 0.0, 1.0);
  const bool sparse = asr_kra >= 0.90 && s_kra.p_l0 <= 0.30 && s_kra.p_l0 < 0.5 * s_plain.p_l0 &&
                      std::abs(asr_kra - asr_plain) <= 0.05 && pgd_secs + plain_secs < 600.0;
  report(4, "sparsity vs unmasked PGD", sparse,
         fmt("KRA-PGD ASR %.3f (>=0.90) P_L0 %.4f (<=0.30); unmasked PGD ASR %.3f P_L0 %.4f, "
             "ratio %.3f (<0.5), ASR gap %.3f (<=0.05); %.0f s (<600 s)",
             asr_kra, s_kra.p_l0, asr_plain, s_plain.p_l0, s_kra.p_l0 / s_plain.p_l0,
             std::abs(asr_kra - asr_plain), pgd_secs + plain_secs));

  const double l2_pgd = mean_of(kra_pgd, &ImageResult::p_l2);
  const double l2_df = mean_of(kra_df, &ImageResult::p_l2);
  report(5, "L2 ordering DeepFool vs PGD", l2_df < l2_pgd && l2_pgd >= 2.0 * l2_df,
         fmt("P_L2 KRA-DeepFool %.5f, KRA-PGD %.5f, factor %.2f (>=2)", l2_df, l2_pgd,
             l2_pgd / l2_df));

  // Mask sizes at the threshold where each multi-layer KRA-PGD run stopped.
  const std::vector<std::string> taps = a.tap_names();
  const std::vector<std::string> deepest{taps.back()};
  double multi = 0.0, last = 0.0;
  std::size_t strictly_smaller = 0;
  for (std::size_t i = 0; i < f.test.size(); ++i) {
    const double t = kra_pgd[i].outcome.thresholds.back();
    const auto sal = layer_saliencies(a, f.test[i].pixels, taps);
    const std::size_t m = select_key_region(sal, t).count();
    const std::size_t l = threshold_mask(sal.back(), t).count();
    multi += static_cast<double>(m);
    last += static_cast<double>(l);
    strictly_smaller += m < l;
  }
  multi /= static_cast<double>(f.test.size());
  last /= static_cast<double>(f.test.size());
  report(6, "multi-layer vs deepest-layer mask", multi < last && f.test.size() >= 100,
         fmt("mean |M| %.1f with %zu layers vs %.1f with %s alone over %zu images "
             "(%zu strictly smaller)",
             multi, taps.size(), last, deepest.front().c_str(), f.test.size(), strictly_smaller));
}

// ---- 7: metric formulas ------------------------------------------------------------

void metric_formulas() {
  const double white = asr(0.99, 0.006);
  const double transfer = atr(asr(0.99, 0.43), white);
  const bool ok = std::abs(white - 0.99) <= 0.005 + 1e-12 && std::abs(transfer - 0.56) <= 0.01;
  report(7, "metric formulas", ok,
         fmt("ASR(0.99 -> 0.006) = %.4f (0.99); ATR(0.99 -> 0.43) = %.4f (0.56 within 0.01)", white,
             transfer));
}

// ---- 8: transfer matrix ------------------------------------------------------------

void transfer_matrix(const Fixture& f) {
  std::vector<NamedDetector> dets;
  for (const auto& [id, d] : f.detectors) dets.push_back({id, &d});
  const auto start = Clock::now();
  const ExperimentReport r =
      run_matrix(dets, std::vector<AttackSpec>{make_attack_spec("kra-pgd", KraConfig{})}, f.test);
  bool ok = r.rows.size() == dets.size() * dets.size();
  std::string cells;
  for (const auto& row : r.rows) {
    const double v = row.atr.value_or(std::nan(""));
    ok = ok && row.atr.has_value() &&
         (row.white_box() ? std::abs(v - 1.0) < 0.005 : (v > 0.0 && v < 1.0));
    cells += fmt(" %s->%s=%.2f", row.origin.c_str(), row.target.c_str(), v);
  }
  report(8, "transfer matrix", ok,
         fmt("KRA-PGD ATR%s; %.0f s", cells.c_str(), since(start)));
}

// ---- 9: CLI determinism ---------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

bool run_cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd =
      "cd '" + cwd.string() + "' && '" KRA_CLI_PATH "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

void cli_determinism() {
  const fs::path work = fs::temp_directory_path() / "kra_acceptance_cli";
  fs::remove_all(work);
  fs::create_directories(work);
  struct Step {
    const char* command;
    std::string args;
    const char* out;
  };
  const std::vector<Step> steps{
      {"gen-data", "gen-data --data d --data-seed 77 --train 24 --val 4 --test 6", "d"},
      {"train", "train --data d --arch A --weights w/A.kraw --epochs 3", "w"},
      {"attack", "attack --data d --weights w/A.kraw --inner pgd --jobs 3 --out a", "a"},
      {"matrix", "matrix --data d --weights w/A.kraw,w/A.kraw --attacks kra-fgsm,deepfool --jobs 2 --out m", "m"},
  };
  std::string detail;
  bool ok = true;
  for (const Step& s : steps) {
    bool same = run_cli(work, s.args);
    if (same) {
      fs::rename(work / s.out, work / (std::string(s.out) + ".first"));
      same = run_cli(work, s.args) &&
             tree(work / (std::string(s.out) + ".first")) == tree(work / s.out);
      // Later steps read the second copy; the first is only for comparison.
    }
    ok = ok && same;
    detail += fmt("%s%s %s", detail.empty() ? "" : ", ", s.command, same ? "identical" : "DIFFERS");
  }
  fs::remove_all(work);
  report(9, "CLI determinism", ok, detail + " (attack --jobs 3, matrix --jobs 2)");
}

// ---- 10: linear oracles -------------------------------------------------------------------

class Linear : public Classifier {
 public:
  Linear(Tensor w, double b) : w_(std::move(w)), b_(b) {}
  Shape input_shape() const override { return w_.shape(); }
  double logit(const Tensor& x) const override { return dot(w_, x) + b_; }
  LogitGradient logit_gradient(const Tensor& x) const override { return {logit(x), w_}; }
  const Tensor& w() const { return w_; }

 private:
  Tensor w_;
  double b_;
};

void linear_oracles() {
  Rng rng(10);
  double df_err = 0.0;
  std::size_t sign_mismatch = 0, cases = 0;
  for (int c = 0; c < 100; ++c) {
    Tensor w({3, 8, 8});
    for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);
    const double z0 = rng.uniform(0.01, 0.3) * (c % 2 ? 1.0 : -1.0);
    const Tensor x({3, 8, 8}, 0.5);
    const double sum = std::accumulate(w.data().begin(), w.data().end(), 0.0);
    const Linear m(w, z0 - 0.5 * sum);
    const DeepFoolParams p;
    const Perturbation r = deepfool(m, x, p);
    const double scale = -(1.0 + p.overshoot) * z0 / dot(w, w);
    for (std::size_t i = 0; i < w.size(); ++i) df_err = std::max(df_err, std::abs(r.r[i] - scale * w[i]));

    const Perturbation g = fgsm(m, x, FgsmParams{0.03});
    const double toward = z0 < 0 ? 1.0 : -1.0;  // raise a real logit, lower a fake one
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double s = w[i] > 0 ? 1.0 : (w[i] < 0 ? -1.0 : 0.0);
      sign_mismatch += g.r[i] != 0.03 * toward * s;
    }
    ++cases;
  }
  report(10, "closed-form oracles", df_err <= 1e-10 && sign_mismatch == 0,
         fmt("DeepFool max deviation from the boundary projection %.1e (<=1e-10); FGSM entries "
             "off sign(w): %zu; %zu linear detectors",
             df_err, sign_mismatch, cases));
}

}  // namespace

int main() {
  const auto start = Clock::now();
  try {
    gradient_correctness();
    mlskrs_invariants();
    const Fixture f = build_fixture();
    attacks_on_a(f);
    metric_formulas();
    transfer_matrix(f);
    cli_determinism();
    linear_oracles();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("# %d of 10 criteria failed; total %.0f s\n", failures, since(start));
  return failures == 0 ? 0 : 1;
}
