#ifndef MMSFM_H
#define MMSFM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmsfmStatus {
  MMSFM_STATUS_OK = 0,
  MMSFM_STATUS_NULL_POINTER = 1,
  MMSFM_STATUS_INVALID_INPUT = 2,
  MMSFM_STATUS_OUT_OF_RANGE = 3,
  MMSFM_STATUS_DEGENERATE_PLAN = 4,
  MMSFM_STATUS_SINGULAR_VARIANCE = 5,
  MMSFM_STATUS_DIVERGED = 6,
  MMSFM_STATUS_PARSE = 7,
  MMSFM_STATUS_CHECKPOINT = 8,
  MMSFM_STATUS_IO = 9,
  MMSFM_STATUS_SOLVER = 10,
  MMSFM_STATUS_BUFFER_TOO_SMALL = 11,
  MMSFM_STATUS_PANIC = 12,
} MmsfmStatus;

typedef enum MmsfmSplineFamily {
  MMSFM_SPLINE_FAMILY_MONOTONE_HERMITE = 0,
  MMSFM_SPLINE_FAMILY_NATURAL_CUBIC = 1,
} MmsfmSplineFamily;

// Trained flow and score networks with a diffusion scale.
typedef struct MmsfmModel MmsfmModel;

// Fitted piecewise-cubic curve.
typedef struct MmsfmSpline MmsfmSpline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *mmsfm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *mmsfm_version(void);

// Fits a spline through `n_knots` knots. `values` is `n_knots × dim`.
//
// # Safety
// Pointers must be valid for the stated lengths; `out` must be writable.
enum MmsfmStatus mmsfm_spline_fit(enum MmsfmSplineFamily family,
                                  const double *times,
                                  size_t n_knots,
                                  const double *values,
                                  size_t dim,
                                  struct MmsfmSpline **out);

// Dimension of the spline's values, or 0 for a null handle.
//
// # Safety
// `spline` must be null or a live handle.
size_t mmsfm_spline_dim(const struct MmsfmSpline *spline);

// Writes the spline value at `t` into `out` (at least `dim` values).
//
// # Safety
// `spline` must be a live handle; `out` valid for `out_len` values.
enum MmsfmStatus mmsfm_spline_eval(const struct MmsfmSpline *spline,
                                   double t,
                                   double *out,
                                   size_t out_len);

// Writes the time derivative at `t` into `out` (at least `dim` values).
//
// # Safety
// `spline` must be a live handle; `out` valid for `out_len` values.
enum MmsfmStatus mmsfm_spline_eval_derivative(const struct MmsfmSpline *spline,
                                              double t,
                                              double *out,
                                              size_t out_len);

// Releases a spline. Null is a no-op.
//
// # Safety
// `spline` must be null or a handle not yet freed.
void mmsfm_spline_free(struct MmsfmSpline *spline);

// Loads flow and score checkpoints written by the training command.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum MmsfmStatus mmsfm_model_load(const char *flow_path,
                                  const char *score_path,
                                  double sigma,
                                  struct MmsfmModel **out);

// State dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t mmsfm_model_dim(const struct MmsfmModel *model);

// Number of time points on the uniform integration grid over `[t0, t1]`.
//
// # Safety
// `out` must be writable.
enum MmsfmStatus mmsfm_grid_len(double t0, double t1, size_t steps_per_unit, size_t *out);

// Integrates `n_particles` initial states over `[t0, t1]`. Writes the full
// trajectory, particle-major: `out[(p·T + n)·dim + j]` with `T` from
// [`mmsfm_grid_len`]. Nonzero `deterministic` integrates the flow ODE.
//
// # Safety
// `model` must be a live handle; buffers valid for their stated lengths.
enum MmsfmStatus mmsfm_model_generate(const struct MmsfmModel *model,
                                      const double *x0,
                                      size_t n_particles,
                                      double t0,
                                      double t1,
                                      size_t steps_per_unit,
                                      uint64_t seed,
                                      int32_t deterministic,
                                      double *out,
                                      size_t out_len);

// Releases a model. Null is a no-op.
//
// # Safety
// `model` must be null or a handle not yet freed.
void mmsfm_model_free(struct MmsfmModel *model);

// Exact minimum-cost coupling for a `rows × cols` cost matrix and the
// given marginal weights. Writes the `rows × cols` plan.
//
// # Safety
// Buffers must be valid for their stated lengths.
enum MmsfmStatus mmsfm_exact_plan(const double *cost,
                                  size_t rows,
                                  size_t cols,
                                  const double *row_weights,
                                  const double *col_weights,
                                  double *out_plan,
                                  size_t out_len);

// Empirical Wasserstein cost with uniform weights: `p = 1` gives W₁,
// `p = 2` gives W₂².
//
// # Safety
// Buffers must be valid for their stated lengths; `out` writable.
enum MmsfmStatus mmsfm_wasserstein(const double *x,
                                   size_t nx,
                                   const double *y,
                                   size_t ny,
                                   size_t dim,
                                   uint32_t p,
                                   double *out);

// Biased MMD² estimate with the Gaussian kernel `exp(−γ‖x−y‖²)`.
//
// # Safety
// Buffers must be valid for their stated lengths; `out` writable.
enum MmsfmStatus mmsfm_mmd_gaussian(const double *x,
                                    size_t nx,
                                    const double *y,
                                    size_t ny,
                                    size_t dim,
                                    double gamma,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMSFM_H */
