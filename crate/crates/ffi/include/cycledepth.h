#ifndef CYCLEDEPTH_H
#define CYCLEDEPTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * `which` value selecting the student network `G_s`.
 */
#define CD_WHICH_STUDENT 0

/**
 * `which` value selecting the refined output of the full cycle.
 */
#define CD_WHICH_TEACHER 1

/**
 * Result of every `cd_*` call.
 */
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  CD_STATUS_NULL_POINTER = 1,
  CD_STATUS_INVALID_ARGUMENT = 2,
  CD_STATUS_SHAPE_MISMATCH = 3,
  CD_STATUS_IO = 4,
  CD_STATUS_FORMAT = 5,
  CD_STATUS_CHECKPOINT = 6,
  CD_STATUS_NON_FINITE = 7,
  CD_STATUS_PANIC = 8,
  CD_STATUS_OTHER = 9,
} CdStatus;

/**
 * Loaded network parameters. Opaque to C.
 */
typedef struct CdModel CdModel;

/**
 * Depth metrics, mirroring the JSON report of `cycledepth eval`.
 */
typedef struct CdEvalReport {
  double abs_rel;
  double sq_rel;
  double rmse;
  double rmse_log;
  double a1;
  double a2;
  double a3;
  uint64_t pixels;
  double cap_meters;
} CdEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL after a
 * success. The pointer stays valid until the next `cd_*` call on the same
 * thread.
 */
const char *cd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cd_version(void);

/**
 * Loads a checkpoint written by `cycledepth train`. On success `*out`
 * owns a handle that must be released with [`cd_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CdStatus cd_model_load(const char *path, struct CdModel **out);

/**
 * Releases a handle from [`cd_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void cd_model_free(struct CdModel *model);

/**
 * Input size the model was built for.
 *
 * # Safety
 * `model` must be a live handle; `height` and `width` writable pointers.
 */
enum CdStatus cd_model_dims(const struct CdModel *model, size_t *height, size_t *width);

/**
 * Predicts the left-frame disparity of one right view.
 *
 * `image` holds `3·height·width` floats (planar RGB), `out` receives
 * `height·width` disparities in pixels. `which` is [`CD_WHICH_STUDENT`] or
 * [`CD_WHICH_TEACHER`].
 *
 * # Safety
 * `model` must be a live handle and both buffers must have the sizes above.
 */
enum CdStatus cd_model_infer(const struct CdModel *model,
                             const float *image,
                             size_t height,
                             size_t width,
                             uint32_t which,
                             float *out);

/**
 * `depth = focal·baseline / max(disparity, min_disp)`, elementwise. Pass
 * `min_disp <= 0` for the library default.
 *
 * # Safety
 * `disparity` must hold `len` floats and `out` `len` doubles.
 */
enum CdStatus cd_disparity_to_depth(const float *disparity,
                                    size_t len,
                                    double focal_length,
                                    double baseline,
                                    double min_disp,
                                    double *out);

/**
 * Depth metrics over pixels with `gt > 0`, both sides clipped to
 * `[0.1, cap_meters]`.
 *
 * # Safety
 * `pred` and `gt` must each hold `len` doubles; `out` must be writable.
 */
enum CdStatus cd_compute_metrics(const double *pred,
                                 const double *gt,
                                 size_t len,
                                 double cap_meters,
                                 struct CdEvalReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYCLEDEPTH_H */
