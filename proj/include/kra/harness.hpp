#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kra/detector.hpp"
#include "kra/key_region_attack.hpp"
#include "kra/synth_data.hpp"

namespace kra {

// Attack success rate, 1 - acc_attack / acc_clean. Unclamped; throws
// division_by_zero when acc_clean is 0.
double asr(double acc_clean, double acc_attack);
// Attack transfer ratio, asr_target / asr_origin. Unclamped; throws
// division_by_zero when asr_origin is 0.
double atr(double asr_target, double asr_origin);
// Fraction of H x W pixel positions where any channel has |r| > tol.
double p_l0(const Tensor& r, double tol = 1e-9);
// Root-mean-square entry of r: |r|_2 / sqrt(C H W).
double p_l2(const Tensor& r);

// One attack setting of an experiment. "kra-<inner>" runs the key region
// container; a bare "<inner>" id runs the inner attack once, unmasked.
struct AttackSpec {
  std::string id;
  bool masked = true;
  KraConfig config;  // config.inner is used by both kinds
};

AttackSpec make_attack_spec(const std::string& id, const KraConfig& base,
                            const FgsmParams& fgsm = {}, const PgdParams& pgd = {},
                            const DeepFoolParams& deepfool = {});

struct ImageResult {
  std::string image_id;
  Label label = Label::real;
  AttackOutcome outcome;
  Tensor adversarial;  // x + r_final
  double p_l0 = 0.0;
  double p_l2 = 0.0;
  std::optional<std::string> error;  // set if the attack threw
};

// Attacks every image; `jobs` worker threads share the immutable detector.
// Results are in input order and independent of scheduling. A throwing image
// is recorded with `error` and a zero perturbation, never rethrown.
std::vector<ImageResult> attack_images(const Detector& detector,
                                       std::span<const LabeledImage> images,
                                       const AttackSpec& spec, std::size_t jobs = 1);

struct AttackSummary {
  std::size_t images = 0;
  std::size_t flipped = 0;
  std::size_t errors = 0;
  double acc_clean = 0.0;
  double acc_attack = 0.0;
  double asr = 0.0;  // raw
  double p_l0 = 0.0;
  double p_l2 = 0.0;
  double mean_seconds = 0.0;
};

AttackSummary summarize(const Detector& detector, std::span<const LabeledImage> images,
                        std::span<const ImageResult> results);

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

// outcomes.jsonl, adversarial/<id>.ppm, perturbation/<id>.ppm and
// summary.json under `dir`. Wall-clock fields are written only when
// `timing` is set, so repeated runs are byte-identical by default.
void write_attack_outputs(const std::filesystem::path& dir,
                          std::span<const ImageResult> results, const AttackSummary& summary,
                          const ConfigEntries& config, bool timing);

std::string outcome_json_line(const ImageResult& result, bool timing);

struct NamedDetector {
  std::string name;
  const Detector* detector = nullptr;
};

struct ReportRow {
  std::string attack;
  std::string origin;
  std::string target;
  double acc_clean = 0.0;
  double acc_attack = 0.0;
  double asr_raw = 0.0;
  std::optional<double> atr;
  double p_l0 = 0.0;
  double p_l2 = 0.0;
  double mean_seconds = 0.0;
  std::size_t errors = 0;

  double asr() const;  // raw value clamped to [0, 1]
  bool white_box() const { return origin == target; }
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  ConfigEntries config;
};

// For every (attack, origin) pair: attack the split on the origin detector,
// then score the adversarial examples on every detector. The origin row
// comes first, followed by the transfer rows in detector order. ATR is
// reported only when there is more than one detector.
ExperimentReport run_matrix(std::span<const NamedDetector> detectors,
                            std::span<const AttackSpec> attacks,
                            std::span<const LabeledImage> images, std::size_t jobs = 1);

inline constexpr const char* kReportCsvHeader =
    "attack,origin,target,acc_clean,acc_attack,asr,atr,p_l0,p_l2,mean_seconds";

struct DetectorGradcheck {
  std::string architecture;
  std::size_t parameters = 0;
  std::vector<std::size_t> indices;  // flat parameter indices that were compared
  std::vector<double> errors;        // relative error at each index
  std::size_t kinks_skipped = 0;
  double max_error = 0.0;
};

// Central-difference check of the training loss gradient of a freshly
// initialized detector on a small real/fake batch. Every parameter tensor
// gets at least one of the `probes` indices. A probe whose +/- step flips any
// ReLU on or off is redrawn, since the loss has a kink between the two
// evaluation points and the difference quotient does not estimate the
// derivative there.
DetectorGradcheck gradcheck_detector(const Architecture& architecture, std::uint64_t seed,
                                     std::size_t probes = 64, double step = 1e-5);

std::string format_report_csv(const ExperimentReport& report, bool timing);
std::string format_report_json(const ExperimentReport& report, bool timing);

}  // namespace kra
