#ifndef SELDEFER_H
#define SELDEFER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  SD_STATUS_OK = 0,
  SD_STATUS_NULL_POINTER = 1,
  SD_STATUS_INVALID_ARGUMENT = 2,
  SD_STATUS_IO = 3,
  SD_STATUS_PARSE = 4,
  SD_STATUS_CONFIG = 5,
  SD_STATUS_VALIDATION = 6,
  SD_STATUS_CHECKPOINT = 7,
  SD_STATUS_STATE = 8,
  SD_STATUS_DIVERGENCE = 9,
  SD_STATUS_PANIC = 10,
} SdStatus;

/**
 * A loaded checkpoint.
 */
typedef struct SdModel SdModel;

/**
 * Outcome of one prediction.
 */
typedef struct {
  uint32_t label;
  /**
   * Nonzero when the policy defers.
   */
  uint8_t defer;
  double p_defer;
} SdPrediction;

/**
 * Mirrors the metrics record.
 */
typedef struct {
  double cl_acc;
  double cl_f1;
  double dp_acc;
  double dp_f1;
  double sp_acc;
  double sp_f1;
  double deferral_rate;
  uint64_t n_a;
  uint64_t n_b;
  uint64_t n_c;
  uint64_t n_d;
} SdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after success.
 * Valid until the next call on the same thread.
 */
const char *sd_last_error_message(void);

/**
 * Library version, NUL-terminated, static.
 */
const char *sd_version(void);

/**
 * Loads a checkpoint into `*out`. The handle must be released with
 * `sd_model_free`.
 */
SdStatus sd_model_load(const char *path, SdModel **out);

/**
 * Releases a model; null is ignored.
 */
void sd_model_free(SdModel *model);

/**
 * Length of the feature vector the model expects; 0 for null.
 */
size_t sd_model_input_dim(const SdModel *model);

/**
 * Number of classes; 0 for null.
 */
size_t sd_model_num_classes(const SdModel *model);

/**
 * Featurizes `text` and predicts. `class_probs` may be null; otherwise it
 * must hold exactly `sd_model_num_classes` values.
 */
SdStatus sd_model_predict_text(const SdModel *model,
                               const char *text,
                               double *class_probs,
                               size_t class_probs_len,
                               SdPrediction *out);

/**
 * Predicts from a precomputed feature vector of `sd_model_input_dim`
 * values.
 */
SdStatus sd_model_predict_features(const SdModel *model,
                                   const double *features,
                                   size_t len,
                                   double *class_probs,
                                   size_t class_probs_len,
                                   SdPrediction *out);

/**
 * Writes the hashed, L2-normalized feature vector of `text` into `out`,
 * which must hold `2^bits` values.
 */
SdStatus sd_featurize(const char *text, uint32_t bits, double *out, size_t out_len);

/**
 * Expected reward of the keep/defer distribution `(p_keep, p_defer)`
 * under `signal = [a, b, c, d]`.
 */
SdStatus sd_reward_per_example(double p_keep,
                               double p_defer,
                               bool cl_correct,
                               const double *signal,
                               double *out);

/**
 * Metrics over `n` examples; `actions[i]` nonzero means deferred.
 */
SdStatus sd_compute_metrics(const uint32_t *cl_preds,
                            const uint32_t *gold,
                            const uint8_t *actions,
                            size_t n,
                            SdMetrics *out);

/**
 * Same as the `train` subcommand. `out_dir` may be null to use the
 * configured `output_dir`.
 */
SdStatus sd_train_from_config(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELDEFER_H */
