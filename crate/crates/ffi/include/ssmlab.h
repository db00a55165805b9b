#ifndef SSMLAB_H
#define SSMLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SsmlabStatus {
  SSMLAB_STATUS_OK = 0,
  SSMLAB_STATUS_NULL_POINTER = 1,
  SSMLAB_STATUS_INVALID_ARGUMENT = 2,
  SSMLAB_STATUS_IO = 3,
  SSMLAB_STATUS_FORMAT = 4,
  SSMLAB_STATUS_RUNTIME = 5,
  SSMLAB_STATUS_PANIC = 6,
} SsmlabStatus;

/**
 * Architecture selector for [`ssmlab_model_new`].
 */
typedef enum SsmlabArch {
  SSMLAB_ARCH_VSSM_HIER = 0,
  SSMLAB_ARCH_VSSM_FLAT_BIDIR = 1,
  SSMLAB_ARCH_ATTN_WINDOW = 2,
} SsmlabArch;

/**
 * Attack selector for [`ssmlab_attack`].
 */
typedef enum SsmlabAttack {
  SSMLAB_ATTACK_FGSM = 0,
  SSMLAB_ATTACK_PGD = 1,
  SSMLAB_ATTACK_PATCH_FOOL = 2,
} SsmlabAttack;

/**
 * Opaque model handle.
 */
typedef struct SsmlabModel SsmlabModel;

/**
 * Attack parameters. `epsilon` and `step_size` are in pixel units; for
 * Patch-Fool `step_size` is the initial learning rate and `epsilon` is
 * ignored.
 */
typedef struct SsmlabAttackParams {
  enum SsmlabAttack kind;
  float epsilon;
  float step_size;
  size_t iterations;
  size_t n_patches;
  uint64_t seed;
} SsmlabAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ssmlab_version(void);

/**
 * Message of the last failure on this thread, or null if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ssmlab_last_error(void);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SsmlabStatus ssmlab_model_load(const char *path, struct SsmlabModel **out);

/**
 * Builds a freshly initialized model at the default desk configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SsmlabStatus ssmlab_model_new(enum SsmlabArch arch, uint64_t seed, struct SsmlabModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum SsmlabStatus ssmlab_model_save(const struct SsmlabModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ssmlab_model_free(struct SsmlabModel *model);

/**
 * Image height, width, channels and class count.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SsmlabStatus ssmlab_model_shape(const struct SsmlabModel *model,
                                     size_t *height,
                                     size_t *width,
                                     size_t *channels,
                                     size_t *n_classes);

/**
 * Class logits for one image.
 *
 * # Safety
 * `pixels` must hold `len` floats and `logits` room for `n_logits`.
 */
enum SsmlabStatus ssmlab_model_logits(const struct SsmlabModel *model,
                                      const float *pixels,
                                      size_t len,
                                      float *logits,
                                      size_t n_logits);

/**
 * Predicted class for one image.
 *
 * # Safety
 * `pixels` must hold `len` floats and `class_out` be valid.
 */
enum SsmlabStatus ssmlab_model_predict(const struct SsmlabModel *model,
                                       const float *pixels,
                                       size_t len,
                                       size_t *class_out);

/**
 * Paper defaults for `kind`.
 */
struct SsmlabAttackParams ssmlab_attack_defaults(enum SsmlabAttack kind);

/**
 * Attacks one image, writing the adversarial image to `adv` (same length
 * as `pixels`) and whether the prediction flipped to `success`.
 *
 * # Safety
 * `params` must be valid, `pixels` and `adv` must hold `len` floats and
 * `success` must be valid.
 */
enum SsmlabStatus ssmlab_attack(const struct SsmlabModel *model,
                                const struct SsmlabAttackParams *params,
                                const float *pixels,
                                size_t len,
                                size_t label,
                                float *adv,
                                bool *success);

/**
 * Runs an experiment spec file and writes its report; `json` selects JSON
 * over CSV.
 *
 * # Safety
 * Both paths must be NUL-terminated strings.
 */
enum SsmlabStatus ssmlab_run_spec(const char *spec, const char *out, bool json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSMLAB_H */
