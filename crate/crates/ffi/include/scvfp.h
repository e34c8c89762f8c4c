#ifndef SCVFP_H
#define SCVFP_H

#include <stddef.h>
#include <stdint.h>

typedef enum ScvfpStatus {
  SCVFP_STATUS_OK = 0,
  SCVFP_STATUS_NULL_POINTER = 1,
  SCVFP_STATUS_INVALID_ARGUMENT = 2,
  SCVFP_STATUS_SHAPE_MISMATCH = 3,
  SCVFP_STATUS_IO = 4,
  SCVFP_STATUS_FORMAT = 5,
  SCVFP_STATUS_CONFIG = 6,
  SCVFP_STATUS_UNDEFINED_METRIC = 7,
  SCVFP_STATUS_NON_FINITE = 8,
  SCVFP_STATUS_PANIC = 9,
} ScvfpStatus;

// Opaque model handle.
typedef struct ScvfpModel ScvfpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *scvfp_version(void);

// Message for the last failed call on this thread, or null. Free the result
// with [`scvfp_string_free`].
char *scvfp_last_error_message(void);

// # Safety
// `s` must be null or a pointer returned by this library.
void scvfp_string_free(char *s);

// Initialises a model from a JSON run config (null for defaults) and seed.
//
// # Safety
// `config_json` must be null or NUL-terminated; `out` must be writable.
enum ScvfpStatus scvfp_model_new(const char *config_json, uint64_t seed, struct ScvfpModel **out);

// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum ScvfpStatus scvfp_model_load(const char *path, struct ScvfpModel **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must be a live handle; `path` must be NUL-terminated.
enum ScvfpStatus scvfp_model_save(const struct ScvfpModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void scvfp_model_free(struct ScvfpModel *model);

// Embedding width `d` and window length `M`.
//
// # Safety
// `model` must be a live handle; outputs must be writable.
enum ScvfpStatus scvfp_model_dims(const struct ScvfpModel *model, size_t *d, size_t *seq_len);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum ScvfpStatus scvfp_model_param_count(const struct ScvfpModel *model, uint64_t *out);

// Predicts the next embedding from a row-major `rows × cols` window into
// `out` (at least `cols` values).
//
// # Safety
// `window` must hold `rows·cols` values and `out` `out_len` values.
enum ScvfpStatus scvfp_model_predict_next(const struct ScvfpModel *model,
                                          const double *window,
                                          size_t rows,
                                          size_t cols,
                                          double *out,
                                          size_t out_len);

// Autoregressive rollout; writes `steps × cols` values row-major.
//
// # Safety
// `window` must hold `rows·cols` values and `out` `out_len` values.
enum ScvfpStatus scvfp_model_rollout(const struct ScvfpModel *model,
                                     const double *window,
                                     size_t rows,
                                     size_t cols,
                                     size_t steps,
                                     double *out,
                                     size_t out_len);

// `‖e − ê‖²` over `len` values.
//
// # Safety
// `e` and `e_hat` must hold `len` values; `out` must be writable.
enum ScvfpStatus scvfp_embedding_mse(const double *e, const double *e_hat, size_t len, double *out);

// `10·log10(255²/mse)`; fails with `UndefinedMetric` unless `mse > 0`.
//
// # Safety
// `out` must be writable.
enum ScvfpStatus scvfp_metric_psnr(double mse, double *out);

// # Safety
// `a` and `b` must hold `len` values; `out` must be writable.
enum ScvfpStatus scvfp_cosine_similarity(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCVFP_H */
