#ifndef CORRFUSE_H
#define CORRFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CfStatus {
  CF_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CF_NULL_POINTER = 1,
  /**
   * An argument was out of range or malformed.
   */
  CF_INVALID_ARGUMENT = 2,
  /**
   * Array lengths did not match.
   */
  CF_SHAPE = 3,
  /**
   * A numeric failure such as a non-finite value.
   */
  CF_NUMERIC = 4,
  /**
   * A file could not be read.
   */
  CF_IO = 5,
  /**
   * A file was read but its contents are malformed.
   */
  CF_FORMAT = 6,
  /**
   * An internal panic was caught at the boundary.
   */
  CF_PANIC = 7,
} CfStatus;

/**
 * A trained network loaded from a checkpoint.
 */
typedef struct CfEstimator CfEstimator;

/**
 * A sampled object model with its symmetry metadata.
 */
typedef struct CfModel CfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Message describing the most recent failure on this thread, or an empty
 * string after a successful call. The pointer stays valid until the next
 * call into this library on the same thread.
 */
const char *cf_last_error_message(void);

/**
 * Samples `points` surface points of a shape. `shape` is `box`,
 * `cylinder` or `lshape`, optionally with dimensions in meters such as
 * `box(0.1,0.07,0.05)`. Free the handle with [`cf_model_free`].
 *
 * # Safety
 * `shape` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CfStatus cf_model_create(const char *shape,
                              size_t points,
                              uint64_t seed,
                              struct CfModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cf_model_create`] and not be freed twice.
 */
void cf_model_free(struct CfModel *model);

/**
 * Number of sampled points in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum CfStatus cf_model_len(const struct CfModel *model, size_t *out);

/**
 * Copies the model points into `out`, which holds `capacity` points
 * (`3 * capacity` doubles). Fails with `CF_SHAPE` if it is too small.
 *
 * # Safety
 * `out` must be writable for `3 * capacity` doubles.
 */
enum CfStatus cf_model_points(const struct CfModel *model, double *out, size_t capacity);

/**
 * Whether the model carries symmetry metadata (and so is scored with ADD-S).
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum CfStatus cf_model_is_symmetric(const struct CfModel *model, bool *out);

/**
 * Loads an estimator or refiner checkpoint written by `corrfuse train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CfStatus cf_estimator_load(const char *path, struct CfEstimator **out);

/**
 * Releases an estimator handle. Null is ignored.
 *
 * # Safety
 * `estimator` must come from [`cf_estimator_load`] and not be freed twice.
 */
void cf_estimator_free(struct CfEstimator *estimator);

/**
 * Most confident pose for an observed point cloud of `n` points with
 * per-point colors in `[0, 1]`.
 *
 * # Safety
 * `points` and `colors` must hold `3 * n` doubles; `out_pose` 7 doubles.
 */
enum CfStatus cf_estimator_predict(const struct CfEstimator *estimator,
                                   const double *points,
                                   const double *colors,
                                   size_t n,
                                   double *out_pose);

/**
 * Runs `iters` refinement steps from `initial_pose` with a refiner
 * checkpoint.
 *
 * # Safety
 * As [`cf_estimator_predict`]; `initial_pose` must hold 7 doubles.
 */
enum CfStatus cf_estimator_refine(const struct CfEstimator *refiner,
                                  const double *points,
                                  const double *colors,
                                  size_t n,
                                  const double *initial_pose,
                                  size_t iters,
                                  double *out_pose);

/**
 * ADD distance in meters: mean distance between corresponding model points
 * under the two poses.
 *
 * # Safety
 * `pred` and `gt` must hold 7 doubles; `out` writable.
 */
enum CfStatus cf_add(const struct CfModel *model,
                     const double *pred,
                     const double *gt,
                     double *out);

/**
 * ADD-S distance in meters: mean closest-point distance between the model
 * under the two poses.
 *
 * # Safety
 * As [`cf_add`].
 */
enum CfStatus cf_add_s(const struct CfModel *model,
                       const double *pred,
                       const double *gt,
                       double *out);

/**
 * Area under the accuracy-threshold curve on `[0, max_threshold]`, in
 * `[0, 100]`.
 *
 * # Safety
 * `distances` must hold `n` doubles; `out` writable.
 */
enum CfStatus cf_auc(const double *distances, size_t n, double max_threshold, double *out);

/**
 * Fraction of distances strictly below `threshold`, in `[0, 1]`.
 *
 * # Safety
 * As [`cf_auc`].
 */
enum CfStatus cf_accuracy_below(const double *distances, size_t n, double threshold, double *out);

/**
 * `out = a ∘ b`: apply `b` first, then `a`.
 *
 * # Safety
 * Each pointer must hold 7 doubles. `out` may alias an input.
 */
enum CfStatus cf_pose_compose(const double *a, const double *b, double *out);

/**
 * Inverse rigid transform.
 *
 * # Safety
 * Both pointers must hold 7 doubles. `out` may alias `pose`.
 */
enum CfStatus cf_pose_inverse(const double *pose, double *out);

/**
 * Transforms `n` points. `out` may alias `points`.
 *
 * # Safety
 * `pose` must hold 7 doubles; `points` and `out` `3 * n` doubles.
 */
enum CfStatus cf_pose_apply(const double *pose, const double *points, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORRFUSE_H */
