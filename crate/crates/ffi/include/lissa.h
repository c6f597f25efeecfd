#ifndef LISSA_H
#define LISSA_H

/* Generated by cbindgen from lissa-ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LissaStatus {
  LISSA_STATUS_OK = 0,
  LISSA_STATUS_NULL_POINTER = 1,
  LISSA_STATUS_INVALID_ARGUMENT = 2,
  LISSA_STATUS_DIMENSION_MISMATCH = 3,
  LISSA_STATUS_DIVERGENCE = 4,
  LISSA_STATUS_NON_FINITE = 5,
  LISSA_STATUS_SINGULAR = 6,
  LISSA_STATUS_PANIC = 7,
  LISSA_STATUS_INTERNAL = 8,
} LissaStatus;

/**
 * Labelled examples for a GNH operator.
 */
typedef struct LissaDataset LissaDataset;

/**
 * Symmetric PSD operator: an explicit matrix or an implicit model GNH.
 */
typedef struct LissaOperator LissaOperator;

/**
 * Recommended LiSSA settings. `t_steps` is meaningful only when
 * `has_t_steps` is true (it is false at zero damping).
 */
typedef struct LissaHyperParams {
  double eta;
  size_t batch_size;
  size_t t_steps;
  bool has_t_steps;
} LissaHyperParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lissa_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *lissa_version(void);

/**
 * Copies `n` examples with `dim` features (row-major `x`) and labels `y`.
 *
 * # Safety
 * `x` must point to `n * dim` doubles, `y` to `n` labels, `out` to writable storage.
 */
enum LissaStatus lissa_dataset_new(const double *x,
                                   const size_t *y,
                                   size_t n,
                                   size_t dim,
                                   size_t n_classes,
                                   struct LissaDataset **out);

/**
 * # Safety
 * `ds` must come from [`lissa_dataset_new`] and not be freed twice. NULL is ignored.
 */
void lissa_dataset_free(struct LissaDataset *ds);

/**
 * Operator backed by a symmetric `n × n` row-major matrix.
 *
 * # Safety
 * `matrix` must point to `n * n` doubles and `out` to writable storage.
 */
enum LissaStatus lissa_operator_dense(const double *matrix, size_t n, struct LissaOperator **out);

/**
 * GNH of an MLP (`n_layers` widths, input first, classes last; two widths
 * give a softmax-linear model) at parameters `theta`.
 *
 * `activation`: 0 = tanh, 1 = relu. `batch_size` 0 uses the full dataset
 * on every product. `fd_delta` 0 uses exact Jacobian-vector products,
 * otherwise central differences with that step.
 *
 * # Safety
 * `layers` must point to `n_layers` widths, `theta` to `n_theta` doubles,
 * `data` to a live dataset handle, `out` to writable storage.
 */
enum LissaStatus lissa_operator_gnh(const size_t *layers,
                                    size_t n_layers,
                                    uint32_t activation,
                                    const double *theta,
                                    size_t n_theta,
                                    const struct LissaDataset *data,
                                    size_t batch_size,
                                    double fd_delta,
                                    struct LissaOperator **out);

/**
 * Dimension of the operator, or 0 for NULL.
 *
 * # Safety
 * `op` must be NULL or a live operator handle.
 */
size_t lissa_operator_dim(const struct LissaOperator *op);

/**
 * # Safety
 * `op` must come from a `lissa_operator_*` constructor and not be freed twice. NULL is ignored.
 */
void lissa_operator_free(struct LissaOperator *op);

/**
 * One operator application `out = H̃ u` (a fresh batch draw for sampled GNH).
 *
 * # Safety
 * `u` and `out` must point to `n` doubles, `n` equal to the operator dimension.
 */
enum LissaStatus lissa_operator_apply(const struct LissaOperator *op,
                                      const double *u,
                                      size_t n,
                                      uint64_t seed,
                                      double *out);

/**
 * Hutchinson estimate of `Tr(H)/N` with its standard error.
 *
 * # Safety
 * `op` must be a live handle; `mean` and `se` writable.
 */
enum LissaStatus lissa_estimate_trace(const struct LissaOperator *op,
                                      size_t n_probes,
                                      uint64_t seed,
                                      double *mean,
                                      double *se);

/**
 * Top eigenvalue from a `d`-dimensional Gaussian sketch.
 *
 * # Safety
 * `op` must be a live handle; `out` writable.
 */
enum LissaStatus lissa_top_eigenvalue(const struct LissaOperator *op,
                                      size_t d,
                                      uint64_t seed,
                                      double *out);

/**
 * LiSSA settings from `Tr(H)/N`, `N`, `λ_max` and damping `λ`.
 *
 * # Safety
 * `out` must be writable.
 */
enum LissaStatus lissa_recommend(double trace_per_param,
                                 size_t n_params,
                                 double lambda_max,
                                 double lambda_damp,
                                 double c,
                                 double t_multiplier,
                                 struct LissaHyperParams *out);

/**
 * Runs `t_steps` LiSSA iterations from zero for `(H + λ) u = g`.
 *
 * # Safety
 * `g` and `u_out` must point to `n` doubles, `n` equal to the operator dimension.
 */
enum LissaStatus lissa_solve(const struct LissaOperator *op,
                             const double *g,
                             size_t n,
                             double eta,
                             double lambda_damp,
                             size_t t_steps,
                             uint64_t seed,
                             double *u_out);

/**
 * Dense solve of `(H + λ) u = g` for an `n × n` row-major `h`.
 *
 * # Safety
 * `h` must point to `n * n` doubles; `g` and `u_out` to `n`.
 */
enum LissaStatus lissa_exact_ihvp(const double *h,
                                  size_t n,
                                  double lambda_damp,
                                  const double *g,
                                  double *u_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LISSA_H */
