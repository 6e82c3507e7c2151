#ifndef VARFUSE_H
#define VARFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VfStatus {
  VF_STATUS_OK = 0,
  VF_STATUS_NULL_POINTER = 1,
  VF_STATUS_INVALID_UTF8 = 2,
  VF_STATUS_DIMENSION = 3,
  VF_STATUS_DOMAIN = 4,
  VF_STATUS_CONTRACT = 5,
  VF_STATUS_FORMAT = 6,
  VF_STATUS_SCHEMA = 7,
  VF_STATUS_CONFIG = 8,
  VF_STATUS_DIVERGENCE = 9,
  VF_STATUS_IO = 10,
  VF_STATUS_SERIALIZATION = 11,
  VF_STATUS_PANIC = 12,
} VfStatus;

typedef struct VfConfig VfConfig;

typedef struct VfDataset VfDataset;

typedef struct VfModel VfModel;

/**
 * The four F1 averages of a report.
 */
typedef struct VfScores {
  double micro;
  double macro_f1;
  double weighted;
  double samples;
} VfScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *vf_last_error(void);

const char *vf_version(void);

/**
 * New configuration from a preset name, or the default when `name` is null.
 *
 * # Safety
 * `name` is null or a NUL-terminated string; `out` is writable.
 */
enum VfStatus vf_config_new(const char *name, struct VfConfig **out);

/**
 * Sets one `key = value` entry.
 *
 * # Safety
 * `cfg` is a live handle; `key` and `value` are NUL-terminated.
 */
enum VfStatus vf_config_set(struct VfConfig *cfg, const char *key, const char *value);

/**
 * Applies a configuration file.
 *
 * # Safety
 * `cfg` is a live handle; `path` is NUL-terminated.
 */
enum VfStatus vf_config_load(struct VfConfig *cfg, const char *path);

/**
 * # Safety
 * `cfg` is null or a handle not yet freed.
 */
void vf_config_free(struct VfConfig *cfg);

/**
 * Reads an MMT1 container.
 *
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum VfStatus vf_dataset_read(const char *path, struct VfDataset **out);

/**
 * Synthetic records at the full embedding widths.
 *
 * # Safety
 * `out` is writable.
 */
enum VfStatus vf_dataset_synthetic(uint64_t seed,
                                   size_t records,
                                   double noise,
                                   struct VfDataset **out);

/**
 * Writes an MMT1 container.
 *
 * # Safety
 * `ds` is a live handle; `path` is NUL-terminated.
 */
enum VfStatus vf_dataset_write(const struct VfDataset *ds, const char *path);

/**
 * Record count and widths. Any output pointer may be null.
 *
 * # Safety
 * `ds` is a live handle; non-null outputs are writable.
 */
enum VfStatus vf_dataset_shape(const struct VfDataset *ds,
                               size_t *records,
                               size_t *text_dim,
                               size_t *image_dim,
                               size_t *n_classes);

/**
 * # Safety
 * `ds` is null or a handle not yet freed.
 */
void vf_dataset_free(struct VfDataset *ds);

/**
 * Runs every configured cycle and writes the artifacts to `out_dir`.
 * `scores`, when non-null, receives the cycle means.
 *
 * # Safety
 * `cfg` is a live handle; `out_dir` and `label` are NUL-terminated;
 * `scores` is null or writable.
 */
enum VfStatus vf_train(const struct VfConfig *cfg,
                       const char *label,
                       const char *out_dir,
                       struct VfScores *scores);

/**
 * Model weights from a checkpoint written by training.
 *
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum VfStatus vf_model_load(const char *path, struct VfModel **out);

/**
 * Text width, image width and class count of a model.
 *
 * # Safety
 * `model` is a live handle; non-null outputs are writable.
 */
enum VfStatus vf_model_shape(const struct VfModel *model,
                             size_t *text_dim,
                             size_t *image_dim,
                             size_t *n_classes);

/**
 * Logits for `n` row-major records. `logits` holds `n · n_classes` values.
 *
 * # Safety
 * `model` is a live handle; `text` holds `n · text_dim` floats, `image`
 * holds `n · image_dim` floats and `logits` has room for `n · n_classes`.
 */
enum VfStatus vf_model_predict(const struct VfModel *model,
                               const float *text,
                               const float *image,
                               size_t n,
                               double *logits);

/**
 * Scores of thresholded predictions over every record of `ds`.
 *
 * # Safety
 * `model` and `ds` are live handles; `scores` is writable.
 */
enum VfStatus vf_model_evaluate(const struct VfModel *model,
                                const struct VfDataset *ds,
                                double threshold,
                                struct VfScores *scores);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void vf_model_free(struct VfModel *model);

/**
 * Runs the gradient-check suite. `failed` receives the number of failing
 * checks; the status is `Ok` even when some fail.
 *
 * # Safety
 * `failed` is writable.
 */
enum VfStatus vf_gradcheck(uint64_t seed, uint32_t *checks, uint32_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARFUSE_H */
