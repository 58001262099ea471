#ifndef OSDN_H
#define OSDN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OsdnStatus {
  OSDN_STATUS_OK = 0,
  OSDN_STATUS_NULL_POINTER = 1,
  OSDN_STATUS_INVALID_ARGUMENT = 2,
  OSDN_STATUS_IO = 3,
  OSDN_STATUS_PARSE = 4,
  OSDN_STATUS_SHAPE = 5,
  OSDN_STATUS_NUMERIC = 6,
  OSDN_STATUS_DATA = 7,
  OSDN_STATUS_PANIC = 8,
} OsdnStatus;

typedef enum OsdnMode {
  OSDN_MODE_ACC = 0,
  OSDN_MODE_IND = 1,
} OsdnMode;

/**
 * Opaque model handle; keeps the hyperparameters it was trained with.
 */
typedef struct OsdnModel OsdnModel;

/**
 * Opaque task handle.
 */
typedef struct OsdnTask OsdnTask;

typedef struct OsdnTaskInfo {
  size_t k;
  size_t n_source;
  size_t d_source;
  size_t n_target;
  size_t d_target;
  /**
   * 1 when the target domain carries ground truth.
   */
  int32_t labeled;
} OsdnTaskInfo;

typedef struct OsdnMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  size_t n;
} OsdnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Owned by the library.
 */
const char *osdn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *osdn_version(void);

/**
 * Generates and preprocesses a synthetic open-set task.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum OsdnStatus osdn_task_synth(size_t k,
                                size_t unknown_count,
                                size_t n_per_category,
                                size_t d_source,
                                size_t d_target,
                                double separation,
                                uint64_t seed,
                                struct OsdnTask **out);

/**
 * Loads and preprocesses a task file (JSON, `kind` = `csv` or `synth`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum OsdnStatus osdn_task_load(const char *path, struct OsdnTask **out);

/**
 * # Safety
 * `task` must be null or a handle from this library not yet freed.
 */
void osdn_task_free(struct OsdnTask *task);

/**
 * # Safety
 * `task` must be a live handle and `out` a valid pointer.
 */
enum OsdnStatus osdn_task_info(const struct OsdnTask *task, struct OsdnTaskInfo *out);

/**
 * Trains a model on `task`. `hyperparams_json` may be null for defaults; missing
 * fields take their defaults.
 *
 * # Safety
 * `task` must be a live handle, `hyperparams_json` null or NUL-terminated, `out` valid.
 */
enum OsdnStatus osdn_train(const struct OsdnTask *task,
                           const char *hyperparams_json,
                           struct OsdnModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void osdn_model_free(struct OsdnModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum OsdnStatus osdn_model_save(const struct OsdnModel *model, const char *path);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum OsdnStatus osdn_model_load(const char *path, struct OsdnModel **out);

/**
 * Predicts labels in `0..=K` (`K` = unknown) for `rows × cols` row-major,
 * already preprocessed target features.
 *
 * # Safety
 * `features` must point to `rows * cols` doubles and `labels` to `rows` writable slots.
 */
enum OsdnStatus osdn_predict(const struct OsdnModel *model,
                             const double *features,
                             size_t rows,
                             size_t cols,
                             size_t *labels);

/**
 * Evaluates `model` on the labeled target domain of `task`.
 *
 * # Safety
 * `model` and `task` must be live handles and `out` valid.
 */
enum OsdnStatus osdn_evaluate(const struct OsdnModel *model,
                              const struct OsdnTask *task,
                              enum OsdnMode mode,
                              struct OsdnMetrics *out);

/**
 * `1 − K / K′`.
 *
 * # Safety
 * `out` must be valid.
 */
enum OsdnStatus osdn_openness(size_t k, size_t k_prime, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OSDN_H */
