#ifndef HYPERPOINT_H
#define HYPERPOINT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_POINTER = 1,
  HP_STATUS_INVALID_ARGUMENT = 2,
  HP_STATUS_CONTRACT = 3,
  HP_STATUS_SHAPE = 4,
  HP_STATUS_NUMERIC = 5,
  HP_STATUS_FORMAT = 6,
  HP_STATUS_CONFIG = 7,
  HP_STATUS_IO = 8,
  HP_STATUS_INTERNAL = 9,
  HP_STATUS_PANIC = 10,
} HpStatus;

/**
 * Opaque model handle.
 */
typedef struct HpModel HpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *hp_last_error(void);

/**
 * Farthest point sampling of `k` indices from `n` points, starting at `start`.
 *
 * # Safety
 * `xyz` must hold `3 * n` doubles and `out` room for `k` indices.
 */
enum HpStatus hp_fps(const double *xyz, size_t n, size_t k, size_t start, size_t *out);

/**
 * The `k` nearest of `n` points for each of `m` queries, row-major `m × k`.
 *
 * # Safety
 * `xyz` must hold `3 * n` doubles, `queries` `3 * m` doubles and `out`
 * room for `m * k` indices.
 */
enum HpStatus hp_knn(const double *xyz,
                     size_t n,
                     const double *queries,
                     size_t m,
                     size_t k,
                     size_t *out);

/**
 * Up to `k` points within `radius` of each of `m` centres, nearest first;
 * short rows repeat their nearest point. Output is row-major `m × k`.
 *
 * # Safety
 * As for [`hp_knn`].
 */
enum HpStatus hp_ball_group(const double *xyz,
                            size_t n,
                            const double *centres,
                            size_t m,
                            double radius,
                            size_t k,
                            size_t *out);

/**
 * All `intervals + degree` B-spline basis values at `x` on a uniform grid
 * over `[min, max]`.
 *
 * # Safety
 * `out` must have room for `out_len` doubles.
 */
enum HpStatus hp_bspline_basis(double x,
                               double min,
                               double max,
                               size_t intervals,
                               size_t degree,
                               double *out,
                               size_t out_len);

/**
 * Creates a model with the default configuration and fresh parameters.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum HpStatus hp_model_new_default(uint64_t seed, struct HpModel **out);

/**
 * Creates a model from the `[model]` section of a TOML run configuration.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` a valid pointer.
 */
enum HpStatus hp_model_from_config(const char *config_toml, uint64_t seed, struct HpModel **out);

/**
 * Loads a trained model from its configuration file and checkpoint.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` a valid pointer.
 */
enum HpStatus hp_model_load(const char *config_path,
                            const char *checkpoint_path,
                            struct HpModel **out);

/**
 * Writes the model's frame count, points per frame and class count.
 *
 * # Safety
 * `model` must come from a `hp_model_*` constructor; outputs may be null.
 */
enum HpStatus hp_model_shape(const struct HpModel *model,
                             size_t *frames,
                             size_t *points,
                             size_t *classes);

/**
 * Class logits of one sequence of `frames` frames with `points` points
 * each (`frames * points * 3` doubles, frame-major).
 *
 * # Safety
 * `xyz` must hold `frames * points * 3` doubles and `logits` room for
 * `logits_len` doubles.
 */
enum HpStatus hp_model_forward(const struct HpModel *model,
                               const double *xyz,
                               size_t frames,
                               size_t points_per_frame,
                               double *logits,
                               size_t logits_len);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from a `hp_model_*` constructor and not be used again.
 */
void hp_model_free(struct HpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERPOINT_H */
