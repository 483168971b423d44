#ifndef TMC_H
#define TMC_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Codes 2 to 7 match the exit codes of the
 * `tmc` command-line tool.
 */
typedef enum TmcStatus {
  TMC_STATUS_OK = 0,
  /**
   * Shape or weight validation failed inside the library.
   */
  TMC_STATUS_INVALID = 1,
  TMC_STATUS_CONFIG = 2,
  TMC_STATUS_DATA = 3,
  /**
   * Non-finite values or a diverged computation.
   */
  TMC_STATUS_NUMERIC = 4,
  TMC_STATUS_IO = 5,
  /**
   * Corrupt, mismatched or incompatible checkpoint.
   */
  TMC_STATUS_CHECKPOINT = 6,
  /**
   * Unknown or duplicate task, or a model without a component log.
   */
  TMC_STATUS_TASK = 7,
  TMC_STATUS_NULL_POINTER = 8,
  /**
   * A string argument that is not valid UTF-8, or a zero-length array.
   */
  TMC_STATUS_BAD_ARGUMENT = 9,
  /**
   * The output buffer is shorter than the number of classes.
   */
  TMC_STATUS_BUFFER_TOO_SMALL = 10,
  /**
   * A Rust panic was caught at the boundary.
   */
  TMC_STATUS_PANIC = 11,
} TmcStatus;

/**
 * Frozen pre-trained network.
 */
typedef struct TmcBase TmcBase;

/**
 * Tangent model: a base network plus a parameter offset.
 */
typedef struct TmcTangent TmcTangent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *tmc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tmc_version(void);

/**
 * Loads a base checkpoint written by `tmc pretrain`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum TmcStatus tmc_base_load(const char *path, struct TmcBase **out);

/**
 * # Safety
 * `base` must come from [`tmc_base_load`] and not be used afterwards. Null is ignored.
 */
void tmc_base_free(struct TmcBase *base);

/**
 * Input width of the network, or 0 for a null handle.
 *
 * # Safety
 * `base` must be null or a live handle.
 */
size_t tmc_base_input_dim(const struct TmcBase *base);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `base` must be null or a live handle.
 */
size_t tmc_base_num_classes(const struct TmcBase *base);

/**
 * Logits of the base network for one input row.
 *
 * # Safety
 * `x` must point to `x_len` values and `out` to `out_len` writable values.
 */
enum TmcStatus tmc_base_forward(const struct TmcBase *base,
                                const double *x,
                                size_t x_len,
                                double *out,
                                size_t out_len);

/**
 * Loads a tangent checkpoint. Fails with [`TmcStatus::Checkpoint`] unless
 * it was trained on `base`.
 *
 * # Safety
 * `base` must be a live handle, `path` a NUL-terminated string and `out` writable.
 */
enum TmcStatus tmc_tangent_load(const struct TmcBase *base,
                                const char *path,
                                struct TmcTangent **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TmcStatus tmc_tangent_save(const struct TmcTangent *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void tmc_tangent_free(struct TmcTangent *model);

/**
 * Number of tasks folded into the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t tmc_tangent_task_count(const struct TmcTangent *model);

/**
 * Logits of the linearized model for one input row.
 *
 * # Safety
 * `x` must point to `x_len` values and `out` to `out_len` writable values.
 */
enum TmcStatus tmc_tangent_forward(const struct TmcTangent *model,
                                   const double *x,
                                   size_t x_len,
                                   double *out,
                                   size_t out_len);

/**
 * Composes `count` components into a new model.
 *
 * With `weights` null the components are merged in order with the uniform
 * running average and the component log is kept when every input has one,
 * so the result supports [`tmc_tangent_unlearn`]. Otherwise `weights` holds
 * `count` finite coefficients; convex ones give the logit ensemble.
 *
 * # Safety
 * `components` must point to `count` live handles, `weights` must be null or
 * point to `count` values, and `out` must be writable.
 */
enum TmcStatus tmc_tangent_compose(const struct TmcTangent *const *components,
                                   size_t count,
                                   const double *weights,
                                   struct TmcTangent **out);

/**
 * Removes task `task_id` from a composition that kept its component log.
 * With `rescale` nonzero the remaining coefficients are renormalized.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum TmcStatus tmc_tangent_unlearn(const struct TmcTangent *model,
                                   uint32_t task_id,
                                   int32_t rescale,
                                   struct TmcTangent **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMC_H */
