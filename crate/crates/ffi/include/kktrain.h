#ifndef KKTRAIN_H
#define KKTRAIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a Krylov solve, mirroring the solver's status names.
 */
typedef enum KktSolveStatus {
  KKT_SOLVE_STATUS_CONVERGED = 0,
  KKT_SOLVE_STATUS_MAX_ITERS = 1,
  KKT_SOLVE_STATUS_SINGULAR_MIN_LENGTH = 2,
  KKT_SOLVE_STATUS_BREAKDOWN = 3,
} KktSolveStatus;

/**
 * Result codes shared by every entry point.
 */
typedef enum KktStatus {
  KKT_STATUS_OK = 0,
  KKT_STATUS_NULL_POINTER = 1,
  KKT_STATUS_INVALID_ARGUMENT = 2,
  KKT_STATUS_DIMENSION_MISMATCH = 3,
  KKT_STATUS_CONFIG = 4,
  KKT_STATUS_IO = 5,
  KKT_STATUS_NUMERICAL = 6,
  KKT_STATUS_PANIC = 7,
} KktStatus;

/**
 * Opaque experiment: a resolved config ready to run.
 */
typedef struct KktExperiment KktExperiment;

/**
 * Opaque symmetric operator.
 */
typedef struct KktOperator KktOperator;

/**
 * Solver settings. `max_iters = 0` selects the default cap.
 */
typedef struct KktSolverConfig {
  double rtol;
  size_t max_iters;
  double breakdown_tol;
  double transfer_cond;
  double rank_tol;
  bool reorthogonalize;
} KktSolverConfig;

/**
 * `y = B x` for vectors of length `n`. Called on the thread that started the solve.
 */
typedef void (*KktMatvecFn)(void *user, const double *x, double *y, size_t n);

typedef struct KktSolveInfo {
  enum KktSolveStatus status;
  size_t iters;
  size_t qlp_iters;
  double residual_norm;
  double residual_estimate;
  double op_norm_estimate;
  double cond_estimate;
} KktSolveInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if there was none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *kktrain_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kktrain_version(void);

struct KktSolverConfig kktrain_solver_config_default(void);

/**
 * Wraps a row-major `n x n` matrix (copied). The matrix should be symmetric.
 *
 * # Safety
 * `data` must point to `n * n` readable doubles and `out` to a writable handle slot.
 */
enum KktStatus kktrain_operator_dense(size_t n, const double *data, struct KktOperator **out);

/**
 * Wraps a matrix-free operator. `user` is passed back to every call and is
 * not owned by the handle.
 *
 * # Safety
 * `matvec` must write `n` doubles to `y` and stay valid, together with
 * `user`, until the handle is freed.
 */
enum KktStatus kktrain_operator_callback(size_t n,
                                         KktMatvecFn matvec,
                                         void *user,
                                         struct KktOperator **out);

/**
 * Dimension of the operator, or 0 for a null handle.
 *
 * # Safety
 * `op` must be null or a live handle.
 */
size_t kktrain_operator_dim(const struct KktOperator *op);

/**
 * Writes `B x` into `y`.
 *
 * # Safety
 * `op` must be a live handle; `x` and `y` must hold `dim` doubles.
 */
enum KktStatus kktrain_operator_apply(const struct KktOperator *op, const double *x, double *y);

/**
 * # Safety
 * `op` must be null or a handle not yet freed.
 */
void kktrain_operator_free(struct KktOperator *op);

/**
 * Minimum-length (least-squares) solution of `B x = b` by MINRES-QLP.
 * `config` may be null for defaults; `info` may be null.
 *
 * # Safety
 * `op` must be a live handle; `b` and `x` must hold `dim` doubles.
 */
enum KktStatus kktrain_minres_qlp(const struct KktOperator *op,
                                  const double *b,
                                  const struct KktSolverConfig *config,
                                  double *x,
                                  struct KktSolveInfo *info);

/**
 * Plain MINRES on the same operator handle.
 *
 * # Safety
 * As for [`kktrain_minres_qlp`].
 */
enum KktStatus kktrain_minres(const struct KktOperator *op,
                              const double *b,
                              const struct KktSolverConfig *config,
                              double *x,
                              struct KktSolveInfo *info);

/**
 * One-shot MINRES-QLP on a row-major dense matrix, without a handle.
 *
 * # Safety
 * `a` must hold `n * n` doubles; `b` and `x` must hold `n`.
 */
enum KktStatus kktrain_minres_qlp_dense(size_t n,
                                        const double *a,
                                        const double *b,
                                        const struct KktSolverConfig *config,
                                        double *x,
                                        struct KktSolveInfo *info);

/**
 * Loads an experiment TOML. `seed` overrides the file's seed when
 * `override_seed` is true; `out_dir` may be null to keep the file's (or
 * the default) output directory.
 *
 * # Safety
 * `path` and a non-null `out_dir` must be NUL-terminated strings; `out`
 * must be a writable handle slot.
 */
enum KktStatus kktrain_experiment_load(const char *path,
                                       bool override_seed,
                                       uint64_t seed,
                                       const char *out_dir,
                                       struct KktExperiment **out);

/**
 * Seed the loaded experiment will run with, or 0 for a null handle.
 *
 * # Safety
 * `exp` must be null or a live handle.
 */
uint64_t kktrain_experiment_seed(const struct KktExperiment *exp);

/**
 * Runs the experiment, writing its outputs. On success `summary_json`
 * (if non-null) receives a JSON summary to release with [`kktrain_string_free`].
 * A diverged run returns [`KktStatus::Numerical`] after its outputs are written.
 *
 * # Safety
 * `exp` must be a live handle; `summary_json` must be null or writable.
 */
enum KktStatus kktrain_experiment_run(const struct KktExperiment *exp, char **summary_json);

/**
 * # Safety
 * `exp` must be null or a handle not yet freed.
 */
void kktrain_experiment_free(struct KktExperiment *exp);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void kktrain_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KKTRAIN_H */
