/* C interface to the key region attack engine.
 *
 * Every function returns a kra_status. On failure the thread-local message
 * from kra_last_error() describes what went wrong; it stays valid until the
 * next failing call on the same thread. Output parameters are written only on
 * success. Handles are opaque and must be released with the matching
 * *_destroy function. A detector handle may be shared between threads for
 * prediction and attacks; training mutates it and needs exclusive access.
 *
 * Images cross the boundary as C x H x W arrays of doubles in [0, 1],
 * channel-major, the layout the PPM reader produces.
 */
#ifndef KRA_KRA_H
#define KRA_KRA_H

#include <stddef.h>
#include <stdint.h>

#if defined(KRA_BUILDING_LIBRARY)
#define KRA_API __attribute__((visibility("default")))
#else
#define KRA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum kra_status {
  KRA_OK = 0,
  KRA_ERR_INVALID_ARGUMENT = 1,
  KRA_ERR_SHAPE_MISMATCH = 2,
  KRA_ERR_DOMAIN = 3,
  KRA_ERR_UNKNOWN_TAP = 4,
  KRA_ERR_IO = 5,
  KRA_ERR_VERSION_MISMATCH = 6,
  KRA_ERR_CHECKSUM_MISMATCH = 7,
  KRA_ERR_UNKNOWN_ARCHITECTURE = 8,
  KRA_ERR_DIVERGENCE = 9,
  KRA_ERR_DIVISION_BY_ZERO = 10,
  KRA_ERR_INTERNAL = 11
} kra_status;

KRA_API const char* kra_version(void);
KRA_API const char* kra_status_string(kra_status status);
KRA_API const char* kra_last_error(void);

/* ---- data ---------------------------------------------------------------- */

typedef struct kra_dataset_options {
  uint64_t seed;
  size_t train; /* images per class */
  size_t val;
  size_t test;
} kra_dataset_options;

KRA_API void kra_dataset_options_init(kra_dataset_options* options);

/* Writes <dir>/manifest.txt and <dir>/<split>/<label>_<seed>.ppm. */
KRA_API kra_status kra_dataset_build(const kra_dataset_options* options, const char* dir);

/* Number of images (both classes) in one split of a built dataset. */
KRA_API kra_status kra_dataset_count(const char* dir, const char* split, size_t* count);

/* One generated image at the default 3 x 32 x 32 size. `pixels` must hold
 * `len` = 3072 doubles. */
KRA_API kra_status kra_generate_image(uint64_t seed, int fake, double* pixels, size_t len);

/* ---- detectors ----------------------------------------------------------- */

typedef struct kra_detector kra_detector;

typedef struct kra_prediction {
  int fake; /* 1 when the detector says fake */
  double probability;
  double logit;
} kra_prediction;

typedef struct kra_train_options {
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  double momentum;
  double clip_norm; /* 0 disables gradient clipping */
  uint64_t seed;
} kra_train_options;

KRA_API void kra_train_options_init(kra_train_options* options);

/* Space-separated registry ids, e.g. "A B C". */
KRA_API const char* kra_architectures(void);

KRA_API kra_status kra_detector_create(const char* architecture, uint64_t seed,
                                       kra_detector** out);
/* `expected_architecture` may be NULL. */
KRA_API kra_status kra_detector_load(const char* path, const char* expected_architecture,
                                     kra_detector** out);
KRA_API kra_status kra_detector_save(const kra_detector* detector, const char* path);
KRA_API void kra_detector_destroy(kra_detector* detector);

/* The returned string lives as long as the handle. */
KRA_API const char* kra_detector_architecture(const kra_detector* detector);
/* dims[0..2] = C, H, W. */
KRA_API kra_status kra_detector_input_dims(const kra_detector* detector, size_t dims[3]);
/* Comma-separated tap names, "conv1,conv2,...". Lives as long as the handle. */
KRA_API const char* kra_detector_layers(const kra_detector* detector);

KRA_API kra_status kra_detector_predict(const kra_detector* detector, const double* pixels,
                                        size_t len, kra_prediction* out);

/* Trains on the train split of a built dataset, scoring the val split after
 * each epoch. `history_csv` (may be NULL) receives epoch,loss,train_acc,val_acc
 * rows. `final_val_accuracy` may be NULL. */
KRA_API kra_status kra_detector_train(kra_detector* detector, const char* dataset_dir,
                                      const kra_train_options* options,
                                      const char* history_csv, double* final_val_accuracy);

KRA_API kra_status kra_detector_accuracy(const kra_detector* detector, const char* dataset_dir,
                                         const char* split, double* accuracy);

/* ---- attacks ------------------------------------------------------------- */

typedef struct kra_attack_options {
  /* "kra-fgsm", "kra-pgd", "kra-deepfool" run the key region attack;
   * "fgsm", "pgd", "deepfool" run the inner attack once over the whole image. */
  const char* method;
  double t_alpha;
  double t_prime;
  double beta;
  size_t u_max;
  int recompute_mask;
  const char* layers;             /* comma-separated taps; NULL or "" = all */
  const char* saliency_objective; /* "logit", "probability" or "loss" */
  int saliency_absolute;
  const char* upsampling; /* "bilinear" or "nearest" */
  double fgsm_epsilon;
  double pgd_epsilon;
  double pgd_step;
  size_t pgd_steps;
  double deepfool_overshoot;
  size_t deepfool_max_steps;
  size_t jobs;
  int timing; /* write wall-clock fields into output files */
} kra_attack_options;

KRA_API void kra_attack_options_init(kra_attack_options* options);

typedef struct kra_attack_result {
  int success;
  int clean_fake;
  int final_fake;
  size_t iterations;
  double final_threshold;
  size_t final_mask_size;
  double p_l0;
  double p_l2;
} kra_attack_result;

/* Attacks one image. `r_out` (may be NULL) receives the perturbation. */
KRA_API kra_status kra_attack_image(const kra_detector* detector, const double* pixels,
                                    size_t len, const kra_attack_options* options,
                                    double* r_out, kra_attack_result* out);

typedef struct kra_attack_summary {
  size_t images;
  size_t flipped;
  size_t errors;
  double acc_clean;
  double acc_attack;
  double asr; /* unclamped */
  double p_l0;
  double p_l2;
  double mean_seconds;
} kra_attack_summary;

/* Attacks every image of a split and writes outcomes.jsonl, summary.json,
 * adversarial/ and perturbation/ under `out_dir`. `config_text` holds
 * "key=value" lines embedded verbatim into summary.json; blank lines and lines
 * starting with '#' are skipped, anything else is INVALID_ARGUMENT. May be
 * NULL. */
KRA_API kra_status kra_attack_split(const kra_detector* detector, const char* dataset_dir,
                                    const char* split, const kra_attack_options* options,
                                    const char* out_dir, const char* config_text,
                                    kra_attack_summary* out);

/* Attacks the split with every method on every detector and scores every
 * adversarial set on every detector. Writes report.csv and report.json into
 * `out_dir`. `methods` holds `n_methods` method names. */
KRA_API kra_status kra_matrix_run(const kra_detector* const* detectors, const char* const* names,
                                  size_t n_detectors, const char* const* methods,
                                  size_t n_methods, const char* dataset_dir, const char* split,
                                  const kra_attack_options* options, const char* out_dir,
                                  const char* config_text);

/* Key region mask at threshold t. `mask` receives H x W bytes (0 or 1). */
KRA_API kra_status kra_key_region(const kra_detector* detector, const double* pixels,
                                  size_t len, const kra_attack_options* options, double t,
                                  unsigned char* mask, size_t mask_len, size_t* count);

/* ---- metrics and checks -------------------------------------------------- */

KRA_API kra_status kra_asr(double acc_clean, double acc_attack, double* out);
KRA_API kra_status kra_atr(double asr_target, double asr_origin, double* out);

typedef struct kra_gradcheck_result {
  size_t parameters;
  size_t probes;
  size_t kinks_skipped;
  double max_relative_error;
} kra_gradcheck_result;

/* Central-difference check of the training-loss gradient of a freshly
 * initialized detector at `probes` random parameter indices. */
KRA_API kra_status kra_gradcheck(const char* architecture, uint64_t seed, size_t probes,
                                 double step, kra_gradcheck_result* out);

#ifdef __cplusplus
}
#endif

#endif /* KRA_KRA_H */
