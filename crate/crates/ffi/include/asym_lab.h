#ifndef ASYM_LAB_H
#define ASYM_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AsymStatus {
  ASYM_STATUS_OK = 0,
  ASYM_STATUS_NULL_POINTER = 1,
  ASYM_STATUS_INVALID_ARGUMENT = 2,
  ASYM_STATUS_SHAPE = 3,
  ASYM_STATUS_PARSE = 4,
  ASYM_STATUS_NON_FINITE = 5,
  ASYM_STATUS_DEGENERATE = 6,
  ASYM_STATUS_INTEGRITY = 7,
  ASYM_STATUS_MODEL = 8,
  ASYM_STATUS_DIVERGED = 9,
  ASYM_STATUS_IO = 10,
  ASYM_STATUS_PANIC = 11,
} AsymStatus;

/**
 * FIFO memory bank of unit-norm rows.
 */
typedef struct AsymBank AsymBank;

/**
 * Source-branch encoder parameters.
 */
typedef struct AsymEncoder AsymEncoder;

/**
 * Outcome of [`asym_theory_scalar_check`].
 */
typedef struct AsymTheoryResult {
  double empirical;
  double predicted;
  double predicted_full;
  double ci_half_width;
  bool passed;
  bool passed_full;
} AsymTheoryResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *asym_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *asym_last_error_message(void);

/**
 * Creates a randomly initialized encoder.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle pointer.
 */
enum AsymStatus asym_encoder_new(size_t input,
                                 size_t backbone,
                                 size_t proj_hidden,
                                 size_t out_dim,
                                 uint64_t seed,
                                 struct AsymEncoder **out);

/**
 * Loads the source encoder of a checkpoint written by `asym-lab train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`asym_encoder_new`].
 */
enum AsymStatus asym_encoder_load(const char *path, struct AsymEncoder **out);

/**
 * Releases an encoder. NULL is ignored.
 *
 * # Safety
 * `enc` must come from this library and must not be used afterwards.
 */
void asym_encoder_free(struct AsymEncoder *enc);

/**
 * Writes the input width and output dimension of an encoder.
 *
 * # Safety
 * All pointers must be valid; `enc` must be a live handle.
 */
enum AsymStatus asym_encoder_dims(const struct AsymEncoder *enc, size_t *input, size_t *out_dim);

/**
 * Encodes `rows` input rows into unit-norm encodings `out` (`rows × out_dim`).
 *
 * `bn_groups > 0` uses batch statistics over that many groups; `bn_groups == 0`
 * uses the running BN buffers, which accepts any batch size.
 *
 * # Safety
 * `batch` must hold `rows × input` doubles and `out` `out_len` doubles.
 */
enum AsymStatus asym_encoder_encode(const struct AsymEncoder *enc,
                                    const double *batch,
                                    size_t rows,
                                    size_t bn_groups,
                                    double *out,
                                    size_t out_len);

/**
 * Creates an empty bank.
 *
 * # Safety
 * `out` must be valid for one handle pointer write.
 */
enum AsymStatus asym_bank_new(size_t capacity, size_t dim, struct AsymBank **out);

/**
 * Releases a bank. NULL is ignored.
 *
 * # Safety
 * `bank` must come from this library and must not be used afterwards.
 */
void asym_bank_free(struct AsymBank *bank);

/**
 * Appends `rows` unit-norm rows, evicting the oldest entries when full.
 *
 * # Safety
 * `data` must hold `rows × dim` doubles.
 */
enum AsymStatus asym_bank_enqueue(struct AsymBank *bank, const double *data, size_t rows);

/**
 * Number of filled slots.
 *
 * # Safety
 * `bank` must be a live handle and `fill` writable.
 */
enum AsymStatus asym_bank_fill(const struct AsymBank *bank, size_t *fill);

/**
 * InfoNCE of unit-norm `z` against positives `z_pos` (both `n × dim`) with
 * the bank as negatives. `grad` (`n × dim`) may be NULL.
 *
 * # Safety
 * Array pointers must cover `n × dim` doubles; `loss` must be writable.
 */
enum AsymStatus asym_info_nce(const double *z,
                              const double *z_pos,
                              size_t n,
                              const struct AsymBank *bank,
                              double temperature,
                              double epsilon,
                              double *loss,
                              double *grad);

/**
 * Mean per-dimension population variance of `n × d` encodings.
 *
 * # Safety
 * `z` must hold `n × d` doubles and `out` be writable.
 */
enum AsymStatus asym_cross_image_variance(const double *z, size_t n, size_t d, double *out);

/**
 * Mean intra-image variance of an encoder under a recipe preset
 * (`baseline`, `weaker`, `stronger`, `multicrop`, `scalemix`, `noise`,
 * `identity`). Images are `n_images × 3 × size × size` in `[0, 1]`, and
 * `size` must match the encoder input.
 *
 * # Safety
 * `images` must hold `n_images × 3 × size²` doubles, `recipe` must be a
 * NUL-terminated string and `out` writable.
 */
enum AsymStatus asym_intra_image_variance(const struct AsymEncoder *enc,
                                          const double *images,
                                          size_t n_images,
                                          size_t size,
                                          const char *recipe,
                                          size_t r,
                                          size_t bn_groups,
                                          uint64_t seed,
                                          double *out);

/**
 * Monte-Carlo `V[tr R]` on the one-dimensional fixture (N = 1, K = 4,
 * uniform α) with the target covariance scaled by `sigma_target_scale`.
 *
 * # Safety
 * `out` must be writable.
 */
enum AsymStatus asym_theory_scalar_check(uint64_t trials,
                                         double sigma_target_scale,
                                         uint64_t seed,
                                         struct AsymTheoryResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASYM_LAB_H */
