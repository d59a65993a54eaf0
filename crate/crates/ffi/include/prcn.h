#ifndef PRCN_H
#define PRCN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrcnStatus {
  PRCN_STATUS_OK = 0,
  PRCN_STATUS_NULL_POINTER = 1,
  PRCN_STATUS_INVALID_ARGUMENT = 2,
  PRCN_STATUS_SHAPE = 3,
  PRCN_STATUS_CONFIG = 4,
  PRCN_STATUS_CORRUPT = 5,
  PRCN_STATUS_NON_FINITE = 6,
  PRCN_STATUS_IO = 7,
  PRCN_STATUS_STALE_CACHE = 8,
  PRCN_STATUS_PANIC = 9,
  PRCN_STATUS_OTHER = 10,
} PrcnStatus;

/**
 * Argmax record of one channel max pool forward pass.
 */
typedef struct PrcnArgmax PrcnArgmax;

/**
 * A permanent channel shuffle with its pooling plan.
 */
typedef struct PrcnConnectome PrcnConnectome;

/**
 * A compiled or loaded network.
 */
typedef struct PrcnModel PrcnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *prcn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *prcn_version(void);

/**
 * Variance of the maximum of `n` independent U(0,1) draws.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum PrcnStatus prcn_var_max_closed_form(size_t n, double *out);

/**
 * Monte Carlo estimate of the same variance with its standard error.
 *
 * # Safety
 * `estimate` and `std_err` must be valid pointers to `double`s.
 */
enum PrcnStatus prcn_mc_var_max(size_t n,
                                size_t samples,
                                uint64_t seed,
                                double *estimate,
                                double *std_err);

/**
 * Draws a connectome over `expansion` channels pooled in groups of `cmp`.
 * With `randomized == 0` the shuffle is the identity.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a new handle.
 */
enum PrcnStatus prcn_connectome_build(uint64_t seed,
                                      size_t expansion,
                                      size_t cmp,
                                      bool randomized,
                                      struct PrcnConnectome **out);

/**
 * # Safety
 * `conn` must come from this library and not be used afterwards. Null is
 * accepted.
 */
void prcn_connectome_free(struct PrcnConnectome *conn);

/**
 * # Safety
 * `conn` must be a live handle and the out pointers valid.
 */
enum PrcnStatus prcn_connectome_dims(const struct PrcnConnectome *conn,
                                     size_t *expansion,
                                     size_t *cmp,
                                     size_t *outputs);

/**
 * Copies the permutation into `perm[0..expansion]`.
 *
 * # Safety
 * `perm` must point to `len` writable `size_t`s.
 */
enum PrcnStatus prcn_connectome_perm(const struct PrcnConnectome *conn, size_t *perm, size_t len);

/**
 * Stable hash of the applied index map.
 *
 * # Safety
 * `conn` must be a live handle and `out` valid.
 */
enum PrcnStatus prcn_connectome_hash(const struct PrcnConnectome *conn, uint64_t *out);

/**
 * Writes the versioned blob. Call with `buf == NULL` to query the size
 * through `written`.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes when non-null; `written` valid.
 */
enum PrcnStatus prcn_connectome_serialize(const struct PrcnConnectome *conn,
                                          uint8_t *buf,
                                          size_t cap,
                                          size_t *written);

/**
 * # Safety
 * `buf` must point to `len` readable bytes; `out` valid.
 */
enum PrcnStatus prcn_connectome_deserialize(const uint8_t *buf,
                                            size_t len,
                                            struct PrcnConnectome **out);

/**
 * Channel max pool of `x` laid out `(n, expansion, plane)` into `out`
 * laid out `(n, outputs, plane)`. The argmax record for the backward
 * pass is returned through `argmax` and must be freed by the caller.
 *
 * # Safety
 * `x` and `out` must hold `n·expansion·plane` and `n·outputs·plane`
 * doubles; `argmax` must be valid.
 */
enum PrcnStatus prcn_cmp_forward(const struct PrcnConnectome *conn,
                                 const double *x,
                                 size_t n,
                                 size_t plane,
                                 double *out,
                                 struct PrcnArgmax **argmax);

/**
 * Routes `grad_out` back to the winning channels; `grad_x` is overwritten.
 *
 * # Safety
 * Buffers sized as for [`prcn_cmp_forward`] with the same `n` and `plane`.
 */
enum PrcnStatus prcn_cmp_backward(const struct PrcnConnectome *conn,
                                  const struct PrcnArgmax *argmax,
                                  const double *grad_out,
                                  double *grad_x);

/**
 * # Safety
 * `argmax` must come from this library and not be used afterwards. Null
 * is accepted.
 */
void prcn_argmax_free(struct PrcnArgmax *argmax);

/**
 * Compiles a named preset such as `"convnet36"` or `"prcn(12,3)"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` valid.
 */
enum PrcnStatus prcn_model_compile(const char *name, uint64_t seed, struct PrcnModel **out);

/**
 * Loads a checkpoint written by the training tools.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid.
 */
enum PrcnStatus prcn_model_load(const char *path, struct PrcnModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null
 * is accepted.
 */
void prcn_model_free(struct PrcnModel *model);

/**
 * Input `(channels, height, width)`, class count and trainable
 * parameter count.
 *
 * # Safety
 * `model` must be a live handle and every out pointer valid.
 */
enum PrcnStatus prcn_model_info(const struct PrcnModel *model,
                                size_t *channels,
                                size_t *height,
                                size_t *width,
                                size_t *classes,
                                size_t *params);

/**
 * Eval-mode logits for `n` samples; `logits` receives `n·classes` values.
 *
 * # Safety
 * `model` must be a live handle not used concurrently; `x` must hold
 * `n·c·h·w` doubles and `logits` `n·classes`.
 */
enum PrcnStatus prcn_model_predict(struct PrcnModel *model,
                                   const double *x,
                                   size_t n,
                                   double *logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRCN_H */
