#ifndef TRAJCAL_H
#define TRAJCAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TrajcalStatus {
  TRAJCAL_STATUS_OK = 0,
  TRAJCAL_STATUS_NULL_POINTER = 1,
  TRAJCAL_STATUS_INVALID_ARGUMENT = 2,
  TRAJCAL_STATUS_IO = 3,
  TRAJCAL_STATUS_PARSE = 4,
  TRAJCAL_STATUS_DATA = 5,
  TRAJCAL_STATUS_CONFIG = 6,
  TRAJCAL_STATUS_PANIC = 7,
} TrajcalStatus;

typedef enum TrajcalCalibrationKind {
  TRAJCAL_CALIBRATION_KIND_TEMPERATURE = 0,
  TRAJCAL_CALIBRATION_KIND_DIRICHLET = 1,
} TrajcalCalibrationKind;

typedef enum TrajcalMethod {
  TRAJCAL_METHOD_ONEHOT = 0,
  TRAJCAL_METHOD_RT4U = 1,
  TRAJCAL_METHOD_PSEUDO_T = 2,
  TRAJCAL_METHOD_PSEUDO_D = 3,
} TrajcalMethod;

typedef struct TrajcalCalibration TrajcalCalibration;

typedef struct TrajcalPredictions TrajcalPredictions;

typedef struct TrajcalStore TrajcalStore;

typedef struct TrajcalMetrics {
  double balanced_accuracy;
  double balanced_mae;
  double balanced_ece;
  double aurc;
} TrajcalMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *trajcal_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *trajcal_version(void);

/**
 * Writes softmax(`logits`) into `out`; both have `num_classes` entries.
 */
enum TrajcalStatus trajcal_softmax(const double *logits, size_t num_classes, double *out);

enum TrajcalStatus trajcal_store_load(const char *path, struct TrajcalStore **out);

void trajcal_store_free(struct TrajcalStore *store);

/**
 * Number of samples; 0 for a null handle.
 */
size_t trajcal_store_num_samples(const struct TrajcalStore *store);

size_t trajcal_store_num_classes(const struct TrajcalStore *store);

size_t trajcal_store_num_epochs(const struct TrajcalStore *store);

/**
 * Logits of `sample_id` averaged over every recorded epoch.
 */
enum TrajcalStatus trajcal_store_average_logits(const struct TrajcalStore *store,
                                                const char *sample_id,
                                                double *out,
                                                size_t len);

/**
 * Fits a calibration map on the epoch-averaged validation logits of a
 * store with the default optimizer. The lambdas apply to Dirichlet only.
 */
enum TrajcalStatus trajcal_store_calibrate(const struct TrajcalStore *store,
                                           enum TrajcalCalibrationKind kind,
                                           double lambda1,
                                           double lambda2,
                                           struct TrajcalCalibration **out);

/**
 * Fits a temperature on `n` rows of row-major logits with labels.
 */
enum TrajcalStatus trajcal_fit_temperature(const double *logits,
                                           const size_t *labels,
                                           size_t n,
                                           size_t num_classes,
                                           struct TrajcalCalibration **out);

/**
 * Fits a regularized Dirichlet map on `n` rows of row-major logits.
 */
enum TrajcalStatus trajcal_fit_dirichlet(const double *logits,
                                         const size_t *labels,
                                         size_t n,
                                         size_t num_classes,
                                         double lambda1,
                                         double lambda2,
                                         struct TrajcalCalibration **out);

enum TrajcalStatus trajcal_calibration_read(const char *path, struct TrajcalCalibration **out);

enum TrajcalStatus trajcal_calibration_write(const struct TrajcalCalibration *cal,
                                             const char *path);

void trajcal_calibration_free(struct TrajcalCalibration *cal);

/**
 * Whether the fit met the gradient tolerance; false for a null handle.
 */
bool trajcal_calibration_converged(const struct TrajcalCalibration *cal);

/**
 * The fitted temperature; `TRAJCAL_STATUS_INVALID_ARGUMENT` for a
 * Dirichlet map.
 */
enum TrajcalStatus trajcal_calibration_gamma(const struct TrajcalCalibration *cal, double *out);

/**
 * Calibrated probabilities for one logit vector of `num_classes` entries.
 */
enum TrajcalStatus trajcal_calibration_apply(const struct TrajcalCalibration *cal,
                                             const double *logits,
                                             size_t num_classes,
                                             double *out);

/**
 * Builds pseudo-labels for the store's train split and writes them to
 * `path`. `cal` is optional (null) and required only by the calibrated
 * methods.
 */
enum TrajcalStatus trajcal_pseudo_labels_write(const struct TrajcalStore *store,
                                               enum TrajcalMethod method,
                                               const struct TrajcalCalibration *cal,
                                               const char *path);

enum TrajcalStatus trajcal_predictions_load(const char *path, struct TrajcalPredictions **out);

void trajcal_predictions_free(struct TrajcalPredictions *preds);

size_t trajcal_predictions_len(const struct TrajcalPredictions *preds);

/**
 * Balanced accuracy, MAE, ECE (`num_bins` bins) and AURC over the default
 * coverage grid.
 */
enum TrajcalStatus trajcal_predictions_metrics(const struct TrajcalPredictions *preds,
                                               size_t num_bins,
                                               struct TrajcalMetrics *out);

/**
 * Worst-case fusion of `num_members` row-major probability vectors.
 */
enum TrajcalStatus trajcal_fuse_study(const double *probs,
                                      size_t num_members,
                                      size_t num_classes,
                                      size_t normal_class,
                                      double *out);

/**
 * Runs the end-to-end pipeline into `out_dir`. `config_path` is optional
 * (null for defaults); `seed` overrides the configured seed.
 */
enum TrajcalStatus trajcal_pipeline_run(const char *config_path,
                                        uint64_t seed,
                                        const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJCAL_H */
