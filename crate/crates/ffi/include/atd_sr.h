#ifndef ATD_SR_H
#define ATD_SR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AtdStatus {
  ATD_STATUS_OK = 0,
  ATD_STATUS_NULL_POINTER = 1,
  ATD_STATUS_INVALID_ARGUMENT = 2,
  ATD_STATUS_CONFIG = 3,
  ATD_STATUS_IO = 4,
  ATD_STATUS_FORMAT = 5,
  ATD_STATUS_DIMENSION = 6,
  ATD_STATUS_NON_FINITE = 7,
  ATD_STATUS_DATA = 8,
  ATD_STATUS_PANIC = 9,
} AtdStatus;

/**
 * Opaque model handle.
 */
typedef struct AtdModel AtdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *atd_last_error(void);

/**
 * Creates an untrained model from a named preset.
 *
 * # Safety
 * `preset_name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AtdStatus atd_model_new(const char *preset_name,
                             uint32_t scale,
                             uint64_t seed,
                             struct AtdModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AtdStatus atd_model_load(const char *path, struct AtdModel **out);

/**
 * Writes the model's parameters to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum AtdStatus atd_model_save(const struct AtdModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void atd_model_free(struct AtdModel *model);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `model` must come from this library and `out` be valid.
 */
enum AtdStatus atd_model_param_count(const struct AtdModel *model, uint64_t *out);

/**
 * Upscaling factor of the model.
 *
 * # Safety
 * `model` must come from this library and `out` be valid.
 */
enum AtdStatus atd_model_scale(const struct AtdModel *model, uint32_t *out);

/**
 * Upscales interleaved 8-bit RGB. `dst` must hold
 * `3 · (scale·width) · (scale·height)` bytes; `dst_len` is checked.
 *
 * # Safety
 * `src` must point to `3·width·height` readable bytes and `dst` to
 * `dst_len` writable bytes.
 */
enum AtdStatus atd_upscale_rgb8(const struct AtdModel *model,
                                const uint8_t *src,
                                uint32_t width,
                                uint32_t height,
                                uint8_t *dst,
                                size_t dst_len);

/**
 * PSNR in dB of two interleaved RGB images of equal size.
 *
 * # Safety
 * `a` and `b` must each point to `3·width·height` bytes; `out` must be valid.
 */
enum AtdStatus atd_psnr_rgb8(const uint8_t *a,
                             const uint8_t *b,
                             uint32_t width,
                             uint32_t height,
                             uint32_t crop_border,
                             bool y_only,
                             double *out);

/**
 * Mean SSIM of two interleaved RGB images of equal size.
 *
 * # Safety
 * `a` and `b` must each point to `3·width·height` bytes; `out` must be valid.
 */
enum AtdStatus atd_ssim_rgb8(const uint8_t *a,
                             const uint8_t *b,
                             uint32_t width,
                             uint32_t height,
                             uint32_t crop_border,
                             bool y_only,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATD_SR_H */
