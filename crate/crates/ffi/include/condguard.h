#ifndef CONDGUARD_H
#define CONDGUARD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CgStatus {
  CG_OK = 0,
  CG_NULL_POINTER = 1,
  CG_INVALID_INPUT = 2,
  /**
   * The matrix or linear system is numerically singular.
   */
  CG_SINGULAR = 3,
  CG_NOT_CONVERGED = 4,
  /**
   * An output buffer is shorter than the result.
   */
  CG_BUFFER_TOO_SMALL = 5,
  CG_IO = 6,
  CG_PARSE = 7,
  /**
   * The forward pass produced a non-finite value.
   */
  CG_NON_FINITE = 8,
  CG_PANIC = 99,
} CgStatus;

/**
 * Opaque dense matrix.
 */
typedef struct CgMatrix CgMatrix;

/**
 * Opaque trained network.
 */
typedef struct CgNetwork CgNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code.
 */
const char *cg_status_str(enum CgStatus status);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len`. Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes, or null with `len == 0`.
 */
size_t cg_last_error(char *buf, size_t len);

/**
 * # Safety
 * `data` must hold `rows * cols` doubles; `out` must be writable.
 */
enum CgStatus cg_matrix_new(size_t rows, size_t cols, const double *data, struct CgMatrix **out);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards. Null is a no-op.
 */
void cg_matrix_free(struct CgMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `rows`/`cols` writable.
 */
enum CgStatus cg_matrix_shape(const struct CgMatrix *m, size_t *rows, size_t *cols);

/**
 * Copies the entries row-major into `out`.
 *
 * # Safety
 * `out` must be valid for `len` doubles.
 */
enum CgStatus cg_matrix_read(const struct CgMatrix *m, double *out, size_t len);

/**
 * Thin SVD. `sigma` receives `min(rows, cols)` values in non-increasing
 * order. `u` and `vt` may be null when the vectors are not wanted.
 *
 * # Safety
 * Pointers as documented; `sigma` valid for `sigma_len` doubles.
 */
enum CgStatus cg_svd(const struct CgMatrix *m,
                     double *sigma,
                     size_t sigma_len,
                     struct CgMatrix **u,
                     struct CgMatrix **vt);

/**
 * 2-norm condition number. Infinity for a numerically singular matrix.
 *
 * # Safety
 * `m` live, `out` writable.
 */
enum CgStatus cg_kappa2(const struct CgMatrix *m, double *out);

/**
 * Raises every singular value below `sigma_max / bound` to that floor.
 *
 * # Safety
 * `m` live, `out` writable.
 */
enum CgStatus cg_clamp_condition(const struct CgMatrix *m, double bound, struct CgMatrix **out);

/**
 * Solves `A x = b` for square `A`. Returns `CG_SINGULAR` instead of a
 * non-finite answer.
 *
 * # Safety
 * `b` valid for `b_len` doubles, `x` for `x_len`.
 */
enum CgStatus cg_solve(const struct CgMatrix *a,
                       const double *b,
                       size_t b_len,
                       double *x,
                       size_t x_len);

/**
 * `min ½zᵀQz + qᵀz  s.t.  Az = b`. Writes the primal `z` (length `n`) and the
 * equality duals `nu` (length `m`, may be null).
 *
 * # Safety
 * Handles live; buffers valid for their stated lengths.
 */
enum CgStatus cg_solve_eq_qp(const struct CgMatrix *q_mat,
                             const double *q_vec,
                             const struct CgMatrix *a,
                             const double *b,
                             double *z,
                             size_t z_len,
                             double *nu,
                             size_t nu_len);

/**
 * Loads a `model.json` written by `condguard train`.
 *
 * # Safety
 * `path` is a NUL-terminated UTF-8 string; `out` writable.
 */
enum CgStatus cg_network_load(const char *path, struct CgNetwork **out);

/**
 * # Safety
 * `n` must come from this library and not be used afterwards. Null is a no-op.
 */
void cg_network_free(struct CgNetwork *n);

/**
 * Input and output (class count) widths.
 *
 * # Safety
 * `n` live; outputs writable.
 */
enum CgStatus cg_network_dims(const struct CgNetwork *n, size_t *input_dim, size_t *output_dim);

/**
 * Class probabilities for input `u`. Returns `CG_NON_FINITE` when the
 * optimization layer fails; `probs` is then left untouched.
 *
 * # Safety
 * `u` valid for `u_len` doubles, `probs` for `probs_len`.
 */
enum CgStatus cg_network_forward(const struct CgNetwork *n,
                                 const double *u,
                                 size_t u_len,
                                 double *probs,
                                 size_t probs_len);

/**
 * κ₂ of the constraint matrix the network builds for `u`, before any defense.
 *
 * # Safety
 * `u` valid for `u_len` doubles; `out` writable.
 */
enum CgStatus cg_network_kappa(const struct CgNetwork *n,
                               const double *u,
                               size_t u_len,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONDGUARD_H */
