#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum TpStatus {
  TpOk = 0,
  TpErrInvalidArg = 1,
  TpErrConfig = 2,
  TpErrData = 3,
  TpErrIo = 4,
  TpErrCorrupt = 5,
  TpErrNumeric = 6,
  TpErrPanic = 7,
} TpStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct TpModel TpModel;

/**
 * 2x3 row-major affine matrix mapping normalized output coordinates in
 * [-1, 1] to input coordinates (inverse-mapping convention).
 */
typedef struct TpAffine {
  double m[6];
} TpAffine;

/**
 * Sampling ranges for `tp_affine_sample`; `include_prob` must be 0.5.
 */
typedef struct TpAffinePolicy {
  double include_prob;
  double scale_min;
  double scale_max;
  double rotation_min_deg;
  double rotation_max_deg;
  double shear_min_deg;
  double shear_max_deg;
  double translation_min;
  double translation_max;
} TpAffinePolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tp_version(void);

/**
 * Message for the most recent error on this thread (empty when none).
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *tp_last_error(void);

struct TpAffine tp_affine_identity(void);

/**
 * Default augmentation policy (scale 0.75..4/3 log-uniform, rotation +-30
 * degrees, shear +-10 degrees, translation +-10%).
 */
struct TpAffinePolicy tp_affine_default_policy(void);

/**
 * Transform equivalent to warping by `b` first, then by `a`.
 *
 * # Safety
 * All pointers must be valid for the duration of the call.
 */
enum TpStatus tp_affine_compose(const struct TpAffine *a,
                                const struct TpAffine *b,
                                struct TpAffine *out);

/**
 * Inverse transform; fails on a singular linear block.
 *
 * # Safety
 * All pointers must be valid for the duration of the call.
 */
enum TpStatus tp_affine_invert(const struct TpAffine *a, struct TpAffine *out);

/**
 * Draw a random transform from the policy, deterministic given `seed`.
 *
 * # Safety
 * All pointers must be valid for the duration of the call.
 */
enum TpStatus tp_affine_sample(const struct TpAffinePolicy *policy,
                               uint64_t seed,
                               struct TpAffine *out);

/**
 * Bilinear warp of one `[C, H, W]` image (validity-masked; out-of-frame
 * pixels take `fill`). `out_image` holds `C*H*W` floats; `out_mask`, when
 * non-null, receives `H*W` values in {0, 1}.
 *
 * # Safety
 * Buffers must match the stated sizes.
 */
enum TpStatus tp_warp(const float *image,
                      uintptr_t channels,
                      uintptr_t height,
                      uintptr_t width,
                      const struct TpAffine *transform,
                      float fill,
                      float *out_image,
                      float *out_mask);

/**
 * InfoNCE over `n` embeddings of dimension `d`; `positives[i]` names the
 * positive partner of anchor `i`.
 *
 * # Safety
 * Buffers must match the stated sizes.
 */
enum TpStatus tp_info_nce(const float *embeddings,
                          uintptr_t n,
                          uintptr_t d,
                          const uintptr_t *positives,
                          float temperature,
                          float *out);

/**
 * Accuracy of a cluster assignment under its best label permutation
 * (Hungarian matching on the contingency matrix).
 *
 * # Safety
 * Buffers must match the stated sizes.
 */
enum TpStatus tp_cluster_accuracy(const uintptr_t *assignments,
                                  const uintptr_t *labels,
                                  uintptr_t n,
                                  uintptr_t k,
                                  double *out);

/**
 * Load a checkpoint directory (digest-verified).
 *
 * # Safety
 * `ckpt_dir` must be a NUL-terminated path; `out` must be valid.
 */
enum TpStatus tp_model_load(const char *ckpt_dir, struct TpModel **out);

/**
 * Release a model handle (accepts null).
 *
 * # Safety
 * `model` must come from `tp_model_load` and not be freed twice.
 */
void tp_model_free(struct TpModel *model);

/**
 * Width of the pooled embedding produced by `tp_model_embed`.
 */
uintptr_t tp_model_embed_dim(void);

/**
 * Number of classifier outputs of a loaded model.
 *
 * # Safety
 * `model` must be a live handle.
 */
uintptr_t tp_model_classes(const struct TpModel *model);

/**
 * Pooled encoder embeddings for `n` images; `out` holds
 * `n * tp_model_embed_dim()` floats.
 *
 * # Safety
 * Buffers must match the stated sizes.
 */
enum TpStatus tp_model_embed(const struct TpModel *model,
                             const float *images,
                             uintptr_t n,
                             uintptr_t c,
                             uintptr_t h,
                             uintptr_t w,
                             float *out);

/**
 * Argmax class predictions for `n` images; `out_labels` holds `n` entries.
 *
 * # Safety
 * Buffers must match the stated sizes.
 */
enum TpStatus tp_model_classify(const struct TpModel *model,
                                const float *images,
                                uintptr_t n,
                                uintptr_t c,
                                uintptr_t h,
                                uintptr_t w,
                                uintptr_t *out_labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
