#include "kra/kra.h"

#include <cmath>
#include <cstring>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "kra/detector.hpp"
#include "kra/error.hpp"
#include "kra/harness.hpp"
#include "kra/image_io.hpp"
#include "kra/key_region_attack.hpp"
#include "kra/synth_data.hpp"

struct kra_detector {
  explicit kra_detector(kra::Detector d) : detector(std::move(d)) { refresh(); }

  void refresh() {
    architecture = detector.architecture().id;
    layers.clear();
    for (const auto& name : detector.tap_names()) {
      if (!layers.empty()) layers += ',';
      layers += name;
    }
  }

  kra::Detector detector;
  std::string architecture;
  std::string layers;
};

namespace {

thread_local std::string last_error;

kra_status status_for(kra::ErrorCode code) {
  switch (code) {
    case kra::ErrorCode::invalid_argument: return KRA_ERR_INVALID_ARGUMENT;
    case kra::ErrorCode::shape_mismatch: return KRA_ERR_SHAPE_MISMATCH;
    case kra::ErrorCode::domain: return KRA_ERR_DOMAIN;
    case kra::ErrorCode::unknown_tap: return KRA_ERR_UNKNOWN_TAP;
    case kra::ErrorCode::io: return KRA_ERR_IO;
    case kra::ErrorCode::version_mismatch: return KRA_ERR_VERSION_MISMATCH;
    case kra::ErrorCode::checksum_mismatch: return KRA_ERR_CHECKSUM_MISMATCH;
    case kra::ErrorCode::unknown_architecture: return KRA_ERR_UNKNOWN_ARCHITECTURE;
    case kra::ErrorCode::divergence: return KRA_ERR_DIVERGENCE;
    case kra::ErrorCode::division_by_zero: return KRA_ERR_DIVISION_BY_ZERO;
  }
  return KRA_ERR_INTERNAL;
}

// Runs fn, translating any exception into a status and the thread's message.
template <class Fn>
kra_status guarded(Fn&& fn) {
  try {
    fn();
    return KRA_OK;
  } catch (const kra::Error& e) {
    last_error = e.what();
    return status_for(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown exception";
  }
  return KRA_ERR_INTERNAL;
}

void require(bool ok, const char* what) {
  if (!ok) throw kra::Error(kra::ErrorCode::invalid_argument, what);
}

std::string str(const char* s) { return s ? s : ""; }

kra::Tensor image_from(const kra_detector* d, const double* pixels, size_t len) {
  require(d && pixels, "null detector or pixel buffer");
  const kra::Shape shape = d->detector.input_shape();
  if (len != kra::shape_volume(shape)) {
    throw kra::Error(kra::ErrorCode::shape_mismatch,
                     "pixel buffer holds " + std::to_string(len) + " values, detector expects " +
                         kra::shape_string(shape));
  }
  return kra::Tensor(shape, std::vector<double>(pixels, pixels + len));
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

kra::ConfigEntries parse_config_text(const char* text) {
  kra::ConfigEntries out;
  if (!text) return out;
  std::stringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw kra::Error(kra::ErrorCode::invalid_argument, "config line '" + line + "' is not key=value");
    }
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

kra::SaliencyObjective parse_objective(const std::string& name) {
  if (name.empty() || name == "logit") return kra::SaliencyObjective::logit;
  if (name == "probability") return kra::SaliencyObjective::probability;
  if (name == "loss") return kra::SaliencyObjective::loss;
  throw kra::Error(kra::ErrorCode::invalid_argument, "unknown saliency objective '" + name + "'");
}

kra::Upsampling parse_upsampling(const std::string& name) {
  if (name.empty() || name == "bilinear") return kra::Upsampling::bilinear;
  if (name == "nearest") return kra::Upsampling::nearest;
  throw kra::Error(kra::ErrorCode::invalid_argument, "unknown upsampling '" + name + "'");
}

kra::SaliencyOptions saliency_from(const kra_attack_options& o) {
  kra::SaliencyOptions s;
  s.objective = parse_objective(str(o.saliency_objective));
  s.absolute = o.saliency_absolute != 0;
  s.upsampling = parse_upsampling(str(o.upsampling));
  return s;
}

kra::AttackSpec spec_from(const kra_attack_options* o, const char* method) {
  require(o != nullptr, "null attack options");
  kra::KraConfig base;
  base.t_alpha = o->t_alpha;
  base.t_prime = o->t_prime;
  base.beta = o->beta;
  base.u_max = o->u_max;
  base.recompute_mask_on_candidate = o->recompute_mask != 0;
  base.layers = split_csv(str(o->layers));
  base.saliency = saliency_from(*o);
  const kra::FgsmParams fgsm{o->fgsm_epsilon};
  const kra::PgdParams pgd{o->pgd_epsilon, o->pgd_step, o->pgd_steps};
  const kra::DeepFoolParams deepfool{o->deepfool_overshoot, o->deepfool_max_steps};
  const std::string id = str(method);
  require(!id.empty(), "attack method not set");
  kra::AttackSpec spec = kra::make_attack_spec(id, base, fgsm, pgd, deepfool);
  if (spec.masked) spec.config.validate();
  return spec;
}

std::vector<kra::LabeledImage> split_images(const char* dir, const char* split) {
  require(dir && split, "null dataset path or split");
  return kra::load_split(dir, kra::parse_split(split));
}

}  // namespace

extern "C" {

const char* kra_version(void) { return "1.0.0"; }

const char* kra_status_string(kra_status status) {
  switch (status) {
    case KRA_OK: return "ok";
    case KRA_ERR_INVALID_ARGUMENT: return "invalid argument";
    case KRA_ERR_SHAPE_MISMATCH: return "shape mismatch";
    case KRA_ERR_DOMAIN: return "domain error";
    case KRA_ERR_UNKNOWN_TAP: return "unknown tap";
    case KRA_ERR_IO: return "i/o error";
    case KRA_ERR_VERSION_MISMATCH: return "version mismatch";
    case KRA_ERR_CHECKSUM_MISMATCH: return "checksum mismatch";
    case KRA_ERR_UNKNOWN_ARCHITECTURE: return "unknown architecture";
    case KRA_ERR_DIVERGENCE: return "divergence";
    case KRA_ERR_DIVISION_BY_ZERO: return "division by zero";
    case KRA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* kra_last_error(void) { return last_error.c_str(); }

void kra_dataset_options_init(kra_dataset_options* options) {
  if (!options) return;
  const kra::DatasetManifest m;
  options->seed = m.seed;
  options->train = m.train;
  options->val = m.val;
  options->test = m.test;
}

kra_status kra_dataset_build(const kra_dataset_options* options, const char* dir) {
  return guarded([&] {
    require(options && dir, "null options or directory");
    kra::DatasetManifest m;
    m.seed = options->seed;
    m.train = options->train;
    m.val = options->val;
    m.test = options->test;
    kra::build_dataset(m, dir);
  });
}

kra_status kra_dataset_count(const char* dir, const char* split, size_t* count) {
  return guarded([&] {
    require(dir && split && count, "null argument");
    const kra::DatasetManifest m = kra::read_manifest(dir);
    *count = 2 * m.per_class(kra::parse_split(split));
  });
}

kra_status kra_generate_image(uint64_t seed, int fake, double* pixels, size_t len) {
  return guarded([&] {
    require(pixels != nullptr, "null pixel buffer");
    const kra::LabeledImage im = fake ? kra::generate_fake(seed) : kra::generate_real(seed);
    if (len != im.pixels.size()) {
      throw kra::Error(kra::ErrorCode::shape_mismatch,
                       "pixel buffer must hold " + std::to_string(im.pixels.size()) + " values");
    }
    std::memcpy(pixels, im.pixels.data().data(), len * sizeof(double));
  });
}

void kra_train_options_init(kra_train_options* options) {
  if (!options) return;
  const kra::TrainConfig c;
  options->epochs = c.epochs;
  options->batch_size = c.batch_size;
  options->learning_rate = c.learning_rate;
  options->momentum = c.momentum;
  options->clip_norm = c.clip_norm;
  options->seed = c.seed;
}

const char* kra_architectures(void) {
  static const std::string ids = [] {
    std::string s;
    for (const auto& id : kra::architecture_ids()) s += (s.empty() ? "" : " ") + id;
    return s;
  }();
  return ids.c_str();
}

kra_status kra_detector_create(const char* architecture, uint64_t seed, kra_detector** out) {
  return guarded([&] {
    require(architecture && out, "null argument");
    *out = new kra_detector(kra::Detector::initialize(kra::find_architecture(architecture), seed));
  });
}

kra_status kra_detector_load(const char* path, const char* expected_architecture,
                             kra_detector** out) {
  return guarded([&] {
    require(path && out, "null argument");
    std::optional<std::string_view> expected;
    if (expected_architecture) expected = expected_architecture;
    *out = new kra_detector(kra::load_weights(path, expected));
  });
}

kra_status kra_detector_save(const kra_detector* detector, const char* path) {
  return guarded([&] {
    require(detector && path, "null argument");
    kra::save_weights(detector->detector, path);
  });
}

void kra_detector_destroy(kra_detector* detector) { delete detector; }

const char* kra_detector_architecture(const kra_detector* detector) {
  return detector ? detector->architecture.c_str() : "";
}

kra_status kra_detector_input_dims(const kra_detector* detector, size_t dims[3]) {
  return guarded([&] {
    require(detector && dims, "null argument");
    const kra::Shape s = detector->detector.input_shape();
    for (int i = 0; i < 3; ++i) dims[i] = s[static_cast<std::size_t>(i)];
  });
}

const char* kra_detector_layers(const kra_detector* detector) {
  return detector ? detector->layers.c_str() : "";
}

kra_status kra_detector_predict(const kra_detector* detector, const double* pixels, size_t len,
                                kra_prediction* out) {
  return guarded([&] {
    require(out != nullptr, "null output");
    const kra::Prediction p = detector->detector.predict(image_from(detector, pixels, len));
    out->fake = p.label == kra::Label::fake;
    out->probability = p.probability;
    out->logit = p.logit;
  });
}

kra_status kra_detector_train(kra_detector* detector, const char* dataset_dir,
                              const kra_train_options* options, const char* history_csv,
                              double* final_val_accuracy) {
  return guarded([&] {
    require(detector && options, "null detector or options");
    const auto train = split_images(dataset_dir, "train");
    const auto val = split_images(dataset_dir, "val");
    kra::TrainConfig c;
    c.epochs = options->epochs;
    c.batch_size = options->batch_size;
    c.learning_rate = options->learning_rate;
    c.momentum = options->momentum;
    c.clip_norm = options->clip_norm;
    c.seed = options->seed;
    // Train a copy so a failure leaves the handle untouched.
    kra::Detector trained = detector->detector;
    const kra::TrainHistory history = kra::train(trained, train, val, c);
    if (history_csv) kra::write_file(history_csv, kra::format_history_csv(history));
    const double acc = kra::accuracy(trained, val);
    detector->detector = std::move(trained);
    if (final_val_accuracy) *final_val_accuracy = acc;
  });
}

kra_status kra_detector_accuracy(const kra_detector* detector, const char* dataset_dir,
                                 const char* split, double* accuracy) {
  return guarded([&] {
    require(detector && accuracy, "null argument");
    *accuracy = kra::accuracy(detector->detector, split_images(dataset_dir, split));
  });
}

void kra_attack_options_init(kra_attack_options* options) {
  if (!options) return;
  const kra::KraConfig k;
  const kra::SaliencyOptions s;
  const kra::FgsmParams f;
  const kra::PgdParams p;
  const kra::DeepFoolParams d;
  options->method = "kra-pgd";
  options->t_alpha = k.t_alpha;
  options->t_prime = k.t_prime;
  options->beta = k.beta;
  options->u_max = k.u_max;
  options->recompute_mask = k.recompute_mask_on_candidate;
  options->layers = "";
  options->saliency_objective = "logit";
  options->saliency_absolute = s.absolute;
  options->upsampling = "bilinear";
  options->fgsm_epsilon = f.epsilon;
  options->pgd_epsilon = p.epsilon;
  options->pgd_step = p.step;
  options->pgd_steps = p.steps;
  options->deepfool_overshoot = d.overshoot;
  options->deepfool_max_steps = d.max_steps;
  options->jobs = 1;
  options->timing = 0;
}

kra_status kra_attack_image(const kra_detector* detector, const double* pixels, size_t len,
                            const kra_attack_options* options, double* r_out,
                            kra_attack_result* out) {
  return guarded([&] {
    require(out != nullptr, "null output");
    const kra::Tensor image = image_from(detector, pixels, len);
    const kra::AttackSpec spec = spec_from(options, options ? options->method : nullptr);
    const kra::AttackOutcome o = spec.masked
                                     ? kra::attack(detector->detector, image, spec.config)
                                     : kra::attack_unmasked(detector->detector, image,
                                                            spec.config.inner);
    out->success = o.success;
    out->clean_fake = o.clean_label == kra::Label::fake;
    out->final_fake = o.final_label == kra::Label::fake;
    out->iterations = o.iterations;
    out->final_threshold = o.thresholds.empty() ? std::nan("") : o.thresholds.back();
    out->final_mask_size = o.mask_sizes.empty() ? 0 : o.mask_sizes.back();
    out->p_l0 = kra::p_l0(o.r_final);
    out->p_l2 = kra::p_l2(o.r_final);
    if (r_out) std::memcpy(r_out, o.r_final.data().data(), len * sizeof(double));
  });
}

kra_status kra_attack_split(const kra_detector* detector, const char* dataset_dir,
                            const char* split, const kra_attack_options* options,
                            const char* out_dir, const char* config_text,
                            kra_attack_summary* out) {
  return guarded([&] {
    require(detector && out_dir, "null detector or output directory");
    const kra::AttackSpec spec = spec_from(options, options ? options->method : nullptr);
    const kra::ConfigEntries config = parse_config_text(config_text);
    const auto images = split_images(dataset_dir, split);
    const auto results = kra::attack_images(detector->detector, images, spec, options->jobs);
    const kra::AttackSummary s = kra::summarize(detector->detector, images, results);
    kra::write_attack_outputs(out_dir, results, s, config, options->timing != 0);
    if (out) {
      out->images = s.images;
      out->flipped = s.flipped;
      out->errors = s.errors;
      out->acc_clean = s.acc_clean;
      out->acc_attack = s.acc_attack;
      out->asr = s.asr;
      out->p_l0 = s.p_l0;
      out->p_l2 = s.p_l2;
      out->mean_seconds = s.mean_seconds;
    }
  });
}

kra_status kra_matrix_run(const kra_detector* const* detectors, const char* const* names,
                          size_t n_detectors, const char* const* methods, size_t n_methods,
                          const char* dataset_dir, const char* split,
                          const kra_attack_options* options, const char* out_dir,
                          const char* config_text) {
  return guarded([&] {
    require(detectors && names && methods && options && out_dir, "null argument");
    std::vector<kra::NamedDetector> named;
    for (size_t i = 0; i < n_detectors; ++i) {
      require(detectors[i] && names[i], "null detector or name");
      named.push_back({names[i], &detectors[i]->detector});
    }
    std::vector<kra::AttackSpec> specs;
    for (size_t i = 0; i < n_methods; ++i) specs.push_back(spec_from(options, methods[i]));
    kra::ConfigEntries config = parse_config_text(config_text);
    const auto images = split_images(dataset_dir, split);
    kra::ExperimentReport report = kra::run_matrix(named, specs, images, options->jobs);
    report.config = std::move(config);
    const std::filesystem::path dir(out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
      throw kra::Error(kra::ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
    }
    const bool timing = options->timing != 0;
    kra::write_file(dir / "report.csv", kra::format_report_csv(report, timing));
    kra::write_file(dir / "report.json", kra::format_report_json(report, timing));
  });
}

kra_status kra_key_region(const kra_detector* detector, const double* pixels, size_t len,
                          const kra_attack_options* options, double t, unsigned char* mask,
                          size_t mask_len, size_t* count) {
  return guarded([&] {
    require(options && mask, "null options or mask buffer");
    const kra::Tensor image = image_from(detector, pixels, len);
    std::vector<std::string> layers = split_csv(str(options->layers));
    if (layers.empty()) layers = detector->detector.tap_names();
    const kra::KeyRegionMask m =
        kra::select_key_region(detector->detector, image, layers, t, saliency_from(*options));
    if (mask_len != m.bits().size()) {
      throw kra::Error(kra::ErrorCode::shape_mismatch,
                       "mask buffer must hold " + std::to_string(m.bits().size()) + " bytes");
    }
    std::memcpy(mask, m.bits().data(), mask_len);
    if (count) *count = m.count();
  });
}

kra_status kra_asr(double acc_clean, double acc_attack, double* out) {
  return guarded([&] {
    require(out != nullptr, "null output");
    *out = kra::asr(acc_clean, acc_attack);
  });
}

kra_status kra_atr(double asr_target, double asr_origin, double* out) {
  return guarded([&] {
    require(out != nullptr, "null output");
    *out = kra::atr(asr_target, asr_origin);
  });
}

kra_status kra_gradcheck(const char* architecture, uint64_t seed, size_t probes, double step,
                         kra_gradcheck_result* out) {
  return guarded([&] {
    require(architecture && out, "null argument");
    const kra::DetectorGradcheck r =
        kra::gradcheck_detector(kra::find_architecture(architecture), seed, probes, step);
    out->parameters = r.parameters;
    out->probes = r.indices.size();
    out->kinks_skipped = r.kinks_skipped;
    out->max_relative_error = r.max_error;
  });
}

}  // extern "C"
