#ifndef STYLEMOE_H
#define STYLEMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StylemoeStatus {
  STYLEMOE_STATUS_OK = 0,
  STYLEMOE_STATUS_NULL_POINTER = 1,
  STYLEMOE_STATUS_INVALID_ARGUMENT = 2,
  STYLEMOE_STATUS_IO = 3,
  STYLEMOE_STATUS_FORMAT = 4,
  STYLEMOE_STATUS_VERSION = 5,
  STYLEMOE_STATUS_SHAPE = 6,
  STYLEMOE_STATUS_NON_FINITE = 7,
  STYLEMOE_STATUS_BUFFER_TOO_SMALL = 8,
  STYLEMOE_STATUS_PANIC = 9,
  STYLEMOE_STATUS_OTHER = 10,
} StylemoeStatus;

/**
 * A trained style encoder.
 */
typedef struct StylemoeEncoder StylemoeEncoder;

/**
 * A stylizer: diffusion model with MoE sites plus its frozen encoder.
 */
typedef struct StylemoeStylizer StylemoeStylizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t stylemoe_last_error(char *buf, size_t len);

/**
 * Loads the encoder of an encoder or stylizer checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum StylemoeStatus stylemoe_encoder_load(const char *path, struct StylemoeEncoder **out);

/**
 * # Safety
 * `handle` must be null or come from [`stylemoe_encoder_load`], and is
 * invalid afterwards.
 */
void stylemoe_encoder_free(struct StylemoeEncoder *handle);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live encoder handle.
 */
size_t stylemoe_encoder_embedding_dim(const struct StylemoeEncoder *handle);

/**
 * Square image side the encoder expects, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live encoder handle.
 */
size_t stylemoe_encoder_image_size(const struct StylemoeEncoder *handle);

/**
 * Writes the style embedding of an RGB image into `out` (`out_len` values).
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes and `out` `out_len` doubles.
 */
enum StylemoeStatus stylemoe_encoder_embed(const struct StylemoeEncoder *handle,
                                           const uint8_t *rgb,
                                           size_t width,
                                           size_t height,
                                           double *out,
                                           size_t out_len);

/**
 * Loads a stylizer checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum StylemoeStatus stylemoe_stylizer_load(const char *path, struct StylemoeStylizer **out);

/**
 * # Safety
 * `handle` must be null or come from [`stylemoe_stylizer_load`], and is
 * invalid afterwards.
 */
void stylemoe_stylizer_free(struct StylemoeStylizer *handle);

/**
 * Square image side of the model, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live stylizer handle.
 */
size_t stylemoe_stylizer_image_size(const struct StylemoeStylizer *handle);

/**
 * Samples a stylization of `content` in the style of `style`. Both inputs
 * and `out` are `size * size * 3` bytes.
 *
 * # Safety
 * `content`, `style` and `out` must each hold `size * size * 3` bytes.
 */
enum StylemoeStatus stylemoe_stylize(const struct StylemoeStylizer *handle,
                                     const uint8_t *content,
                                     const uint8_t *style,
                                     size_t size,
                                     size_t category,
                                     size_t steps,
                                     uint64_t seed,
                                     uint8_t *out);

/**
 * Top-k routing of `n` logits: writes k expert indices (ties to the lower
 * index) and their softmax weights.
 *
 * # Safety
 * `logits` must hold `n` doubles, `indices` and `weights` `k` entries each.
 */
enum StylemoeStatus stylemoe_route_logits(const double *logits,
                                          size_t n,
                                          size_t k,
                                          size_t *indices,
                                          double *weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEMOE_H */
