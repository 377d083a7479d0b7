#ifndef PADMIX_H
#define PADMIX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PadmixStatus {
  PADMIX_STATUS_OK = 0,
  PADMIX_STATUS_NULL_POINTER = 1,
  PADMIX_STATUS_INVALID_ARGUMENT = 2,
  PADMIX_STATUS_CONFIG = 3,
  PADMIX_STATUS_MISSING_ARTIFACT = 4,
  PADMIX_STATUS_NUMERIC = 5,
  PADMIX_STATUS_IO = 6,
  PADMIX_STATUS_FORMAT = 7,
  PADMIX_STATUS_PANIC = 8,
} PadmixStatus;

/**
 * Voxel occupancy grid.
 */
typedef struct PadmixGrid PadmixGrid;

/**
 * A trained network with its parameters.
 */
typedef struct PadmixModel PadmixModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator, so a caller can size the buffer.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t padmix_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *padmix_version(void);

/**
 * Builds a grid from `dim^3` values in x-outer, y-fastest order.
 *
 * # Safety
 * `values` must point to `len` floats; `out` must be writable.
 */
enum PadmixStatus padmix_grid_new(size_t dim,
                                  const float *values,
                                  size_t len,
                                  struct PadmixGrid **out);

/**
 * Reads a binvox file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PadmixStatus padmix_grid_read_binvox(const char *path, struct PadmixGrid **out);

/**
 * Writes a binary grid as binvox.
 *
 * # Safety
 * `grid` must be a live handle; `path` a NUL-terminated string.
 */
enum PadmixStatus padmix_grid_write_binvox(const struct PadmixGrid *grid, const char *path);

/**
 * Voxels per axis, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t padmix_grid_dim(const struct PadmixGrid *grid);

/**
 * Copies the `dim^3` values into `out`.
 *
 * # Safety
 * `grid` must be a live handle; `out` must hold `len` floats.
 */
enum PadmixStatus padmix_grid_values(const struct PadmixGrid *grid, float *out, size_t len);

/**
 * Intersection over union after binarizing both grids at `threshold`.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum PadmixStatus padmix_grid_iou(const struct PadmixGrid *a,
                                  const struct PadmixGrid *b,
                                  double threshold,
                                  double *out);

/**
 * Releases a grid. Null is ignored.
 *
 * # Safety
 * `grid` must be null or a handle not yet freed.
 */
void padmix_grid_free(struct PadmixGrid *grid);

/**
 * Loads a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PadmixStatus padmix_model_load(const char *path, struct PadmixModel **out);

/**
 * Output voxels per axis, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t padmix_model_dim(const struct PadmixModel *model);

/**
 * Input image side length, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t padmix_model_image_size(const struct PadmixModel *model);

/**
 * 1 if the network expects a shape prior, 0 otherwise.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t padmix_model_uses_prior(const struct PadmixModel *model);

/**
 * Predicts an occupancy grid from a 2-channel image (silhouette plane then
 * depth plane, row-major). `prior` must be given exactly when the model
 * uses priors.
 *
 * # Safety
 * `model` must be a live handle, `image` must hold `len` floats, `prior`
 * must be null or a live handle and `out` must be writable.
 */
enum PadmixStatus padmix_model_predict(const struct PadmixModel *model,
                                       const float *image,
                                       size_t len,
                                       const struct PadmixGrid *prior,
                                       struct PadmixGrid **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void padmix_model_free(struct PadmixModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PADMIX_H */
