#ifndef GU_H
#define GU_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GuStatus {
  GU_STATUS_OK = 0,
  GU_STATUS_NULL_POINTER = 1,
  GU_STATUS_DIMENSION_MISMATCH = 2,
  GU_STATUS_INVALID_INPUT = 3,
  GU_STATUS_NON_FINITE = 4,
  GU_STATUS_CONFIG = 5,
  GU_STATUS_IO = 6,
  GU_STATUS_INTERNAL = 7,
} GuStatus;

/**
 * Retain basis handle.
 */
typedef struct GuBasis GuBasis;

/**
 * Diagonal metric handle.
 */
typedef struct GuMetric GuMetric;

/**
 * Parameters of one practical GU step.
 */
typedef struct GuStepParams {
  double gamma;
  double alpha;
  double kappa;
  double tau;
  double rho;
  bool sign_aware;
} GuStepParams;

/**
 * Diagnostics of one practical GU step.
 */
typedef struct GuStepSummary {
  double entanglement;
  double normal_norm;
  double tangential_keep_norm;
  double predicted_retain_change;
  double predicted_joint_change;
  size_t kept_count;
  bool cap_applied;
  bool degenerate;
} GuStepSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`) and returns the full message length excluding the NUL.
 * Returns 0 when no error has been recorded.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t gu_last_error(char *buf, size_t cap);

/**
 * Metric `H = diag(1/(v̂+ε))` from Adam second moments.
 *
 * # Safety
 * `v_hat` must point to `dim` readable doubles; `out` must be writable.
 */
enum GuStatus gu_metric_new(const double *v_hat, size_t dim, double epsilon, struct GuMetric **out);

/**
 * # Safety
 * `metric` must be null or a handle from [`gu_metric_new`] not yet freed.
 */
void gu_metric_free(struct GuMetric *metric);

/**
 * Dimension of the metric, 0 for a null handle.
 *
 * # Safety
 * `metric` must be null or a live handle.
 */
size_t gu_metric_dim(const struct GuMetric *metric);

/**
 * `out = H⁻¹ g`
 *
 * # Safety
 * `grad` and `out` must each point to `len` doubles.
 */
enum GuStatus gu_metric_h_gradient(const struct GuMetric *metric,
                                   const double *grad,
                                   size_t len,
                                   double *out);

/**
 * `out = W v`, the whitened coordinates used by the basis.
 *
 * # Safety
 * `v` and `out` must each point to `len` doubles.
 */
enum GuStatus gu_metric_whiten(const struct GuMetric *metric,
                               const double *v,
                               size_t len,
                               double *out);

/**
 * Empty retain basis.
 *
 * # Safety
 * `out` must be writable.
 */
enum GuStatus gu_basis_new(size_t dim,
                           size_t rank_cap,
                           double residual_keep_thresh,
                           struct GuBasis **out);

/**
 * # Safety
 * `basis` must be null or a handle from [`gu_basis_new`] not yet freed.
 */
void gu_basis_free(struct GuBasis *basis);

/**
 * Current rank, 0 for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t gu_basis_rank(const struct GuBasis *basis);

/**
 * Drops every column.
 *
 * # Safety
 * `basis` must be a live handle.
 */
enum GuStatus gu_basis_clear(struct GuBasis *basis);

/**
 * Inserts a whitened retain gradient; `inserted` (optional) reports whether it added a column.
 *
 * # Safety
 * `v` must point to `len` doubles; `inserted` must be null or writable.
 */
enum GuStatus gu_basis_insert(struct GuBasis *basis, const double *v, size_t len, bool *inserted);

/**
 * Practical GU step. Writes the raw-coordinate direction handed to the
 * optimizer into `out_direction` and, when `summary` is non-null, its diagnostics.
 *
 * # Safety
 * `total_grad`, `retain_grad` and `out_direction` must each point to `len`
 * doubles; `summary` must be null or writable.
 */
enum GuStatus gu_compose_step(const struct GuBasis *basis,
                              const struct GuMetric *metric,
                              const double *total_grad,
                              const double *retain_grad,
                              size_t len,
                              struct GuStepParams params,
                              double *out_direction,
                              struct GuStepSummary *summary);

/**
 * Theory-form step `Δθ = -ρ(P⊥ f + β P_T r)` over H-gradients.
 *
 * # Safety
 * `forget_h_grad`, `retain_h_grad` and `out_step` must each point to `len` doubles.
 */
enum GuStatus gu_split_step(const struct GuBasis *basis,
                            const struct GuMetric *metric,
                            const double *forget_h_grad,
                            const double *retain_h_grad,
                            size_t len,
                            double rho,
                            double beta,
                            double *out_step);

/**
 * Runs one episode from key=value config text and returns its per-step CSV
 * in `out_csv`, to be released with [`gu_string_free`]. A failed episode
 * still returns `GU_STATUS_OK`; its status is recorded in the CSV comment line.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out_csv` must be writable.
 */
enum GuStatus gu_run_episode_csv(const char *config_text, char **out_csv);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void gu_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GU_H */
