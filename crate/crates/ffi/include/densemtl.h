/* C interface for the densemtl library. */

#ifndef DENSEMTL_H
#define DENSEMTL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit codes.
 */
typedef enum DmtlStatus {
  /**
   * Success.
   */
  DmtlOk = 0,
  /**
   * Unclassified runtime failure (including caught panics).
   */
  DmtlErrRuntime = 1,
  /**
   * Invalid configuration.
   */
  DmtlErrConfig = 2,
  /**
   * Dataset, checkpoint, or other I/O failure.
   */
  DmtlErrData = 3,
  /**
   * Numerical divergence during training.
   */
  DmtlErrDivergence = 4,
  /**
   * A required pointer argument was NULL.
   */
  DmtlErrNullArgument = 5,
} DmtlStatus;

/**
 * A trained model plus the dataset statistics it needs for inference.
 */
typedef struct DmtlModel DmtlModel;

/**
 * Evaluation metrics; fields without a value (e.g. mIoU for a depth-only
 * model) are NaN.
 */
typedef struct DmtlEvalReport {
  double abs_rel;
  double sq_rel;
  double rmse;
  double rmse_log;
  double delta1;
  double delta2;
  double delta3;
  double miou;
  double pixel_acc;
} DmtlEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message of the most recent failure on this thread; the pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dmtl_last_error(void);

/**
 * Generates the deterministic synthetic dataset under `out_dir` with
 * `train_count` train and `val_count` val scenes.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum DmtlStatus dmtl_gen_data(const char *out_dir,
                              uint64_t seed,
                              uintptr_t train_count,
                              uintptr_t val_count);

/**
 * Trains a model on the dataset at `data_dir`, maintaining a run directory
 * at `out_dir`. `config_text` may be NULL (defaults) or flat `key = value`
 * text with dotted namespaces. On success `*out_model`, when non-NULL,
 * receives the trained model.
 *
 * # Safety
 * Pointer arguments must be valid; `out_model` may be NULL.
 */
enum DmtlStatus dmtl_train(const char *data_dir,
                           const char *out_dir,
                           const char *config_text,
                           struct DmtlModel **out_model);

/**
 * Loads a model from a checkpoint directory; `data_dir` supplies the dataset
 * statistics (normalization, depth range) used at inference time.
 *
 * # Safety
 * Pointer arguments must be valid and `out_model` non-NULL.
 */
enum DmtlStatus dmtl_model_load(const char *checkpoint_dir,
                                const char *data_dir,
                                struct DmtlModel **out_model);

/**
 * Releases a model handle; NULL is a no-op.
 *
 * # Safety
 * `model` must have been produced by this library and not freed before.
 */
void dmtl_model_free(struct DmtlModel *model);

/**
 * Number of trainable generator parameters.
 *
 * # Safety
 * `model` must be a valid handle.
 */
uintptr_t dmtl_model_param_count(const struct DmtlModel *model);

/**
 * Runs inference on one RGB image (`3*height*width` floats in `[0, 1]`,
 * channel-major). Writes metric depth in meters to `out_depth` and class ids
 * to `out_labels` (each `height*width`, row-major); either output may be
 * NULL to skip it.
 *
 * # Safety
 * Buffers must match the stated sizes; the image size must equal the model's
 * configured input size.
 */
enum DmtlStatus dmtl_model_predict(const struct DmtlModel *model,
                                   const float *image,
                                   uintptr_t height,
                                   uintptr_t width,
                                   float *out_depth,
                                   unsigned int *out_labels);

/**
 * Evaluates the model over one dataset split and fills `out_report`.
 *
 * # Safety
 * Pointer arguments must be valid and `out_report` non-NULL.
 */
enum DmtlStatus dmtl_model_evaluate(const struct DmtlModel *model,
                                    const char *data_dir,
                                    const char *split,
                                    struct DmtlEvalReport *out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENSEMTL_H */
