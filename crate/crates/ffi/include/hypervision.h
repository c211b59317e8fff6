#ifndef HYPERVISION_H
#define HYPERVISION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HvStatus {
  HV_STATUS_OK = 0,
  HV_STATUS_NULL_POINTER = 1,
  HV_STATUS_INVALID_ARGUMENT = 2,
  HV_STATUS_SHAPE = 3,
  HV_STATUS_IO = 4,
  HV_STATUS_FORMAT = 5,
  HV_STATUS_CHECKSUM = 6,
  HV_STATUS_NUMERIC = 7,
  HV_STATUS_PANIC = 8,
} HvStatus;

/**
 * Opaque model handle.
 */
typedef struct HvModel HvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after success.
 * Valid until the next call into this library on the same thread.
 */
const char *hv_last_error_message(void);

/**
 * Library version, static storage.
 */
const char *hv_version(void);

/**
 * Freshly initialised model with default hyper-parameters apart from the
 * base width, attention switch and init seed.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle into.
 */
enum HvStatus hv_model_new(size_t base_channels,
                           bool use_attention,
                           uint64_t init_seed,
                           struct HvModel **out);

/**
 * Loads a checkpoint (CRC verified).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum HvStatus hv_model_load(const char *path, struct HvModel **out);

/**
 * Writes weights and running statistics without optimizer state.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum HvStatus hv_model_save(const struct HvModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void hv_model_free(struct HvModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum HvStatus hv_model_parameter_count(const struct HvModel *model, size_t *out);

/**
 * Inference on `[batch,1,height,width]` normalised input; writes the final
 * head's `[batch,3,height,width]` probabilities. `out_len` must equal
 * `batch*3*height*width`.
 *
 * # Safety
 * `input` must hold `batch*height*width` values and `out` `out_len` values.
 */
enum HvStatus hv_model_forward(const struct HvModel *model,
                               const double *input,
                               size_t batch,
                               size_t height,
                               size_t width,
                               double *out,
                               size_t out_len);

/**
 * Segments a raw 8-bit grayscale image at `size × size`; writes `size*size`
 * labels (0 background, 1 kidney, 2 tumor) into `out_labels`.
 *
 * # Safety
 * `pixels` must hold `width*height` bytes, `out_labels` `out_len` bytes.
 */
enum HvStatus hv_model_predict(const struct HvModel *model,
                               const uint8_t *pixels,
                               size_t width,
                               size_t height,
                               size_t size,
                               uint8_t *out_labels,
                               size_t out_len);

/**
 * Deterministic raw phantom `index` of the default generator at `size`
 * with `seed`. Both outputs hold `size*size` bytes.
 *
 * # Safety
 * `out_pixels` and `out_labels` must hold `len` bytes each.
 */
enum HvStatus hv_generate_phantom(size_t size,
                                  uint64_t seed,
                                  size_t index,
                                  uint8_t *out_pixels,
                                  uint8_t *out_labels,
                                  size_t len);

/**
 * Hard Dice of `class` between two label maps of `len` entries; 1 when the
 * class is absent from both.
 *
 * # Safety
 * `pred` and `truth` must hold `len` bytes each.
 */
enum HvStatus hv_dice_score(const uint8_t *pred,
                            const uint8_t *truth,
                            size_t len,
                            uint8_t class_id,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERVISION_H */
