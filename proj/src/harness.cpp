#include "kra/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <thread>

#include <json.hpp>

#include "kra/error.hpp"
#include "kra/gradcheck.hpp"
#include "kra/image_io.hpp"
#include "kra/rng.hpp"

namespace kra {
namespace {

using nlohmann::ordered_json;

template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (std::size_t j = 0; j < jobs; ++j) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string general(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

ordered_json config_json(const ConfigEntries& config) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : config) j[k] = v;
  return j;
}

std::size_t count_correct(const Detector& detector, std::span<const Tensor> pixels,
                          std::span<const LabeledImage> images) {
  const auto z = detector.logits(pixels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    correct += label_for_logit(z[i]) == images[i].label;
  }
  return correct;
}

// Loss of the batch and the on/off pattern of every ReLU in the network.
std::pair<double, std::vector<bool>> loss_and_pattern(const Detector& detector,
                                                      const Tensor& batch,
                                                      const Tensor& labels) {
  Tape tape;
  const auto g = detector.build(tape, batch);
  const Var loss = tape.bce_with_logits(g.logit, labels);
  std::vector<bool> pattern;
  for (const auto& name : detector.tap_names()) {
    for (double v : tape.tap_value(name).data()) pattern.push_back(v > 0.0);
  }
  return {tape.value(loss)[0], std::move(pattern)};
}

}  // namespace

DetectorGradcheck gradcheck_detector(const Architecture& architecture, std::uint64_t seed,
                                     std::size_t probes, double step) {
  if (probes == 0 || !(step > 0.0)) {
    throw Error(ErrorCode::invalid_argument, "gradcheck needs probes > 0 and step > 0");
  }
  const Detector base = Detector::initialize(architecture, seed);
  std::vector<LabeledImage> images;
  for (std::uint64_t s = 0; s < 2; ++s) {
    images.push_back(generate_real(seed + s, architecture.input));
    images.push_back(generate_fake(seed + s, architecture.input));
  }
  const std::vector<std::size_t> order{0, 1, 2, 3};
  const Tensor batch = stack_images(images, order);
  const Tensor labels({4, 1}, {0.0, 1.0, 0.0, 1.0});

  const LossGradient lg = loss_gradient(base, batch, labels);
  std::vector<double> analytic;
  std::vector<std::size_t> offsets;
  for (const auto& g : lg.gradients) {
    offsets.push_back(analytic.size());
    analytic.insert(analytic.end(), g.data().begin(), g.data().end());
  }
  offsets.push_back(analytic.size());
  const Tensor flat = base.flat_parameters();

  DetectorGradcheck report;
  report.architecture = architecture.id;
  report.parameters = flat.size();

  Detector probe = base;
  auto evaluate = [&](std::size_t i, double delta) {
    Tensor p = flat;
    p[i] += delta;
    probe.set_flat_parameters(p);
    return loss_and_pattern(probe, batch, labels);
  };

  Rng rng(mix_seed(seed ^ 0x67726164));
  const std::size_t tensors = offsets.size() - 1;
  const std::size_t max_draws = 50 * probes;
  std::size_t draws = 0;
  for (std::size_t k = 0; k < probes; ++k) {
    // Round-robin over parameter tensors so biases and the dense layer are
    // always covered.
    const std::size_t t = k % tensors;
    const std::size_t len = offsets[t + 1] - offsets[t];
    for (;;) {
      if (++draws > max_draws) {
        throw Error(ErrorCode::domain, "gradcheck could not find kink-free probes");
      }
      const std::size_t i = offsets[t] + static_cast<std::size_t>(rng.below(len));
      const auto [up, up_pattern] = evaluate(i, step);
      const auto [down, down_pattern] = evaluate(i, -step);
      if (up_pattern != down_pattern) {
        ++report.kinks_skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::isnan(analytic[i]) ? std::numeric_limits<double>::infinity()
                                                 : relative_error(analytic[i], numeric);
      report.indices.push_back(i);
      report.errors.push_back(err);
      report.max_error = std::max(report.max_error, err);
      break;
    }
  }
  return report;
}

double asr(double acc_clean, double acc_attack) {
  if (acc_clean == 0.0) {
    throw Error(ErrorCode::division_by_zero, "ASR undefined for zero clean accuracy");
  }
  return 1.0 - acc_attack / acc_clean;
}

double atr(double asr_target, double asr_origin) {
  if (asr_origin == 0.0) {
    throw Error(ErrorCode::division_by_zero, "ATR undefined for zero origin ASR");
  }
  return asr_target / asr_origin;
}

double p_l0(const Tensor& r, double tol) {
  if (r.rank() != 3) {
    throw Error(ErrorCode::shape_mismatch, "p_l0 needs C x H x W, got " + shape_string(r.shape()));
  }
  const std::size_t plane = r.dim(1) * r.dim(2);
  if (plane == 0) return 0.0;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < r.dim(0); ++c) {
      if (std::abs(r[c * plane + i]) > tol) {
        ++changed;
        break;
      }
    }
  }
  return static_cast<double>(changed) / static_cast<double>(plane);
}

double p_l2(const Tensor& r) {
  if (r.empty()) return 0.0;
  return l2_norm(r) / std::sqrt(static_cast<double>(r.size()));
}

AttackSpec make_attack_spec(const std::string& id, const KraConfig& base,
                            const FgsmParams& fgsm, const PgdParams& pgd,
                            const DeepFoolParams& deepfool) {
  AttackSpec spec;
  spec.id = id;
  spec.config = base;
  std::string inner = id;
  if (id.rfind("kra-", 0) == 0) {
    inner = id.substr(4);
    spec.masked = true;
  } else {
    spec.masked = false;
  }
  spec.config.inner = InnerAttack::by_name(inner, fgsm, pgd, deepfool);
  return spec;
}

std::vector<ImageResult> attack_images(const Detector& detector,
                                       std::span<const LabeledImage> images,
                                       const AttackSpec& spec, std::size_t jobs) {
  if (spec.masked) spec.config.validate();
  std::vector<ImageResult> results(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    const LabeledImage& im = images[i];
    ImageResult& res = results[i];
    res.image_id = im.id();
    res.label = im.label;
    try {
      res.outcome = spec.masked ? attack(detector, im.pixels, spec.config)
                                : attack_unmasked(detector, im.pixels, spec.config.inner);
    } catch (const std::exception& e) {
      res.error = e.what();
      res.outcome = AttackOutcome{};
      res.outcome.r_final = Tensor(im.pixels.shape());
      res.outcome.clean_label = res.outcome.final_label = detector.predict(im.pixels).label;
    }
    res.adversarial = im.pixels + res.outcome.r_final;
    res.p_l0 = p_l0(res.outcome.r_final);
    res.p_l2 = p_l2(res.outcome.r_final);
  });
  return results;
}

AttackSummary summarize(const Detector& detector, std::span<const LabeledImage> images,
                        std::span<const ImageResult> results) {
  if (images.empty() || images.size() != results.size()) {
    throw Error(ErrorCode::invalid_argument, "summary needs one result per image");
  }
  AttackSummary s;
  s.images = images.size();
  std::vector<Tensor> clean, adv;
  for (std::size_t i = 0; i < images.size(); ++i) {
    clean.push_back(images[i].pixels);
    adv.push_back(results[i].adversarial);
    s.flipped += results[i].outcome.success;
    s.errors += results[i].error.has_value();
    s.p_l0 += results[i].p_l0;
    s.p_l2 += results[i].p_l2;
    s.mean_seconds += results[i].outcome.seconds;
  }
  const double n = static_cast<double>(s.images);
  s.acc_clean = static_cast<double>(count_correct(detector, clean, images)) / n;
  s.acc_attack = static_cast<double>(count_correct(detector, adv, images)) / n;
  s.asr = s.acc_clean > 0.0 ? asr(s.acc_clean, s.acc_attack) : 0.0;
  s.p_l0 /= n;
  s.p_l2 /= n;
  s.mean_seconds /= n;
  return s;
}

std::string outcome_json_line(const ImageResult& result, bool timing) {
  const AttackOutcome& o = result.outcome;
  ordered_json j;
  j["image"] = result.image_id;
  j["label"] = std::string(to_string(result.label));
  j["clean_prediction"] = std::string(to_string(o.clean_label));
  j["final_prediction"] = std::string(to_string(o.final_label));
  j["success"] = o.success;
  j["status"] = result.error ? std::string("error") : std::string(to_string(o.status));
  j["iterations"] = o.iterations;
  j["thresholds"] = o.thresholds;
  j["mask_sizes"] = o.mask_sizes;
  std::vector<std::string> flags;
  for (AttackFlag f : o.inner_flags) flags.emplace_back(to_string(f));
  j["inner_flags"] = flags;
  j["p_l0"] = result.p_l0;
  j["p_l2"] = result.p_l2;
  j["seconds"] = timing ? ordered_json(o.seconds) : ordered_json(nullptr);
  if (result.error) j["error"] = *result.error;
  return j.dump();
}

void write_attack_outputs(const std::filesystem::path& dir,
                          std::span<const ImageResult> results, const AttackSummary& summary,
                          const ConfigEntries& config, bool timing) {
  std::error_code ec;
  for (const char* sub : {"adversarial", "perturbation"}) {
    std::filesystem::create_directories(dir / sub, ec);
    if (ec) {
      throw Error(ErrorCode::io, "cannot create " + (dir / sub).string() + ": " + ec.message());
    }
  }
  std::string lines;
  for (const auto& r : results) {
    lines += outcome_json_line(r, timing);
    lines += '\n';
    write_ppm(dir / "adversarial" / (r.image_id + ".ppm"), r.adversarial);
    write_ppm(dir / "perturbation" / (r.image_id + ".ppm"),
              normalize_for_display(r.outcome.r_final));
  }
  write_file(dir / "outcomes.jsonl", lines);

  ordered_json j;
  j["config"] = config_json(config);
  j["images"] = summary.images;
  j["flipped"] = summary.flipped;
  j["errors"] = summary.errors;
  j["acc_clean"] = summary.acc_clean;
  j["acc_attack"] = summary.acc_attack;
  j["asr"] = summary.asr;
  j["p_l0"] = summary.p_l0;
  j["p_l2"] = summary.p_l2;
  j["mean_seconds"] = timing ? ordered_json(summary.mean_seconds) : ordered_json(nullptr);
  write_file(dir / "summary.json", j.dump(2) + "\n");
}

double ReportRow::asr() const { return std::clamp(asr_raw, 0.0, 1.0); }

ExperimentReport run_matrix(std::span<const NamedDetector> detectors,
                            std::span<const AttackSpec> attacks,
                            std::span<const LabeledImage> images, std::size_t jobs) {
  if (detectors.empty() || attacks.empty() || images.empty()) {
    throw Error(ErrorCode::invalid_argument, "matrix needs detectors, attacks and images");
  }
  std::vector<Tensor> clean;
  for (const auto& im : images) clean.push_back(im.pixels);
  const double n = static_cast<double>(images.size());

  std::vector<double> acc_clean;
  for (const auto& d : detectors) {
    acc_clean.push_back(static_cast<double>(count_correct(*d.detector, clean, images)) / n);
  }

  ExperimentReport report;
  for (const auto& spec : attacks) {
    for (std::size_t o = 0; o < detectors.size(); ++o) {
      const auto results = attack_images(*detectors[o].detector, images, spec, jobs);
      std::vector<Tensor> adv;
      double l0 = 0.0, l2 = 0.0, secs = 0.0;
      std::size_t errors = 0;
      for (const auto& r : results) {
        adv.push_back(r.adversarial);
        l0 += r.p_l0;
        l2 += r.p_l2;
        secs += r.outcome.seconds;
        errors += r.error.has_value();
      }

      std::vector<std::size_t> order{o};
      for (std::size_t t = 0; t < detectors.size(); ++t) {
        if (t != o) order.push_back(t);
      }
      std::vector<ReportRow> rows;
      for (std::size_t t : order) {
        ReportRow row;
        row.attack = spec.id;
        row.origin = detectors[o].name;
        row.target = detectors[t].name;
        row.acc_clean = acc_clean[t];
        row.acc_attack = static_cast<double>(count_correct(*detectors[t].detector, adv, images)) / n;
        row.asr_raw = row.acc_clean > 0.0 ? asr(row.acc_clean, row.acc_attack) : 0.0;
        row.p_l0 = l0 / n;
        row.p_l2 = l2 / n;
        row.mean_seconds = secs / n;
        row.errors = errors;
        rows.push_back(row);
      }
      const double origin_asr = rows.front().asr_raw;
      if (detectors.size() > 1 && origin_asr != 0.0) {
        for (auto& row : rows) row.atr = atr(row.asr_raw, origin_asr);
      }
      report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    }
  }
  return report;
}

std::string format_report_csv(const ExperimentReport& report, bool timing) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& r : report.rows) {
    out += r.attack + ',' + r.origin + ',' + r.target + ',' + fixed(r.acc_clean) + ',' +
           fixed(r.acc_attack) + ',' + fixed(r.asr()) + ',' + (r.atr ? fixed(*r.atr) : "") +
           ',' + fixed(r.p_l0) + ',' + general(r.p_l2) + ',' +
           (timing ? general(r.mean_seconds) : "") + '\n';
  }
  return out;
}

std::string format_report_json(const ExperimentReport& report, bool timing) {
  ordered_json j;
  j["config"] = config_json(report.config);
  ordered_json rows = ordered_json::array();
  for (const auto& r : report.rows) {
    ordered_json row;
    row["attack"] = r.attack;
    row["origin"] = r.origin;
    row["target"] = r.target;
    row["acc_clean"] = r.acc_clean;
    row["acc_attack"] = r.acc_attack;
    row["asr"] = r.asr();
    row["asr_raw"] = r.asr_raw;
    row["atr"] = r.atr ? ordered_json(*r.atr) : ordered_json(nullptr);
    row["p_l0"] = r.p_l0;
    row["p_l2"] = r.p_l2;
    row["mean_seconds"] = timing ? ordered_json(r.mean_seconds) : ordered_json(nullptr);
    row["errors"] = r.errors;
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

}  // namespace kra
