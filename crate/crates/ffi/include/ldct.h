#ifndef LDCT_H
#define LDCT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LdctStatus {
  LDCT_STATUS_OK = 0,
  LDCT_STATUS_NULL_POINTER = 1,
  LDCT_STATUS_INVALID_PARAMETER = 2,
  LDCT_STATUS_SHAPE_MISMATCH = 3,
  LDCT_STATUS_UNKNOWN_PRESET = 4,
  LDCT_STATUS_CONTAINER = 5,
  LDCT_STATUS_CONFIG = 6,
  LDCT_STATUS_DATA = 7,
  LDCT_STATUS_NUMERIC = 8,
  LDCT_STATUS_IO = 9,
  LDCT_STATUS_INVALID_UTF8 = 10,
  LDCT_STATUS_PANIC = 11,
} LdctStatus;

/**
 * Filtered backprojection for one image grid.
 */
typedef struct LdctFbp LdctFbp;

/**
 * Scan geometry.
 */
typedef struct LdctGeometry LdctGeometry;

/**
 * Trained unrolled reconstruction model.
 */
typedef struct LdctModel LdctModel;

/**
 * Fan-beam forward projector and its adjoint for one image grid.
 */
typedef struct LdctProjector LdctProjector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ldct_version(void);

/**
 * Bytes needed to hold the calling thread's last error message, including
 * the terminating NUL; 0 when there is none.
 */
size_t ldct_last_error_length(void);

/**
 * Copies the last error message into `buf` (truncated, always
 * NUL-terminated when `len > 0`) and returns the bytes written without the
 * NUL.
 *
 * # Safety
 * `buf` must be NULL or point to `len` writable bytes.
 */
size_t ldct_last_error_message(char *buf, size_t len);

/**
 * Looks up a geometry preset (`"desk_small"`, `"paper_full"`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LdctStatus ldct_geometry_preset(const char *name, struct LdctGeometry **out);

/**
 * Number of views and detector bins.
 *
 * # Safety
 * `geometry` must be a live handle; `n_views` and `n_bins` valid pointers.
 */
enum LdctStatus ldct_geometry_dims(const struct LdctGeometry *geometry,
                                   size_t *n_views,
                                   size_t *n_bins);

/**
 * Reconstructed field of view (cm).
 *
 * # Safety
 * `geometry` must be a live handle and `fov` a valid pointer.
 */
enum LdctStatus ldct_geometry_image_fov(const struct LdctGeometry *geometry, double *fov);

/**
 * # Safety
 * `geometry` must be NULL or a handle not yet freed.
 */
void ldct_geometry_free(struct LdctGeometry *geometry);

/**
 * Projector for a `width × height` grid with square pixels of
 * `pixel_size` cm.
 *
 * # Safety
 * `geometry` must be a live handle and `out` a valid pointer.
 */
enum LdctStatus ldct_projector_new(const struct LdctGeometry *geometry,
                                   size_t width,
                                   size_t height,
                                   double pixel_size,
                                   struct LdctProjector **out);

/**
 * `y = A x`.
 *
 * # Safety
 * `x` must hold `x_len` readable values and `y` `y_len` writable values.
 */
enum LdctStatus ldct_projector_forward(const struct LdctProjector *projector,
                                       const double *x,
                                       size_t x_len,
                                       double *y,
                                       size_t y_len);

/**
 * `x = Aᵀ y`.
 *
 * # Safety
 * `y` must hold `y_len` readable values and `x` `x_len` writable values.
 */
enum LdctStatus ldct_projector_back(const struct LdctProjector *projector,
                                    const double *y,
                                    size_t y_len,
                                    double *x,
                                    size_t x_len);

/**
 * # Safety
 * `projector` must be NULL or a handle not yet freed.
 */
void ldct_projector_free(struct LdctProjector *projector);

/**
 * FBP operator for a `width × height` grid.
 *
 * # Safety
 * `geometry` must be a live handle and `out` a valid pointer.
 */
enum LdctStatus ldct_fbp_new(const struct LdctGeometry *geometry,
                             size_t width,
                             size_t height,
                             double pixel_size,
                             struct LdctFbp **out);

/**
 * # Safety
 * `y` must hold `y_len` readable values and `x` `x_len` writable values.
 */
enum LdctStatus ldct_fbp_reconstruct(const struct LdctFbp *fbp,
                                     const double *y,
                                     size_t y_len,
                                     double *x,
                                     size_t x_len);

/**
 * # Safety
 * `fbp` must be NULL or a handle not yet freed.
 */
void ldct_fbp_free(struct LdctFbp *fbp);

/**
 * Loads a model from a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum LdctStatus ldct_model_load(const char *dir, struct LdctModel **out);

/**
 * Image grid of the model; `pixel_size` may be NULL.
 *
 * # Safety
 * `model` must be a live handle; `width` and `height` valid pointers.
 */
enum LdctStatus ldct_model_image_size(const struct LdctModel *model,
                                      size_t *width,
                                      size_t *height,
                                      double *pixel_size);

/**
 * Reconstructs a sinogram in the model's geometry.
 *
 * # Safety
 * `y` must hold `y_len` readable values and `x` `x_len` writable values.
 */
enum LdctStatus ldct_model_reconstruct(const struct LdctModel *model,
                                       const double *y,
                                       size_t y_len,
                                       double *x,
                                       size_t x_len);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ldct_model_free(struct LdctModel *model);

/**
 * PSNR in dB of `x_star` against the reference `x`; `+inf` when equal.
 *
 * # Safety
 * `x` and `x_star` must hold `len` values; `out` must be valid.
 */
enum LdctStatus ldct_psnr(const double *x, const double *x_star, size_t len, double *out);

/**
 * # Safety
 * `x` and `x_star` must hold `len` values; `out` must be valid.
 */
enum LdctStatus ldct_rmse(const double *x, const double *x_star, size_t len, double *out);

/**
 * Mean SSIM of two `width × height` images.
 *
 * # Safety
 * `x` and `x_star` must hold `width * height` values; `out` must be valid.
 */
enum LdctStatus ldct_ssim(const double *x,
                          const double *x_star,
                          size_t width,
                          size_t height,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDCT_H */
