#ifndef SFE_H
#define SFE_H

/* Generated by cbindgen from the sfe-ffi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this API.
 */
typedef enum sfe_status {
  SFE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SFE_STATUS_NULL_ARGUMENT = 1,
  /**
   * A path or string argument was not valid UTF-8.
   */
  SFE_STATUS_BAD_STRING = 2,
  /**
   * The file could not be read.
   */
  SFE_STATUS_IO = 3,
  /**
   * The bytes are not a valid envelope database.
   */
  SFE_STATUS_BAD_DATABASE = 4,
  /**
   * The database carries no constraint payload.
   */
  SFE_STATUS_NO_CONSTRAINTS = 5,
  /**
   * A numeric argument was out of range (non-finite state, zero
   * length, index past the end).
   */
  SFE_STATUS_BAD_VALUE = 6,
  /**
   * A caller-provided buffer is too small; nothing was written.
   */
  SFE_STATUS_SMALL_BUFFER = 7,
  /**
   * Unexpected internal failure.
   */
  SFE_STATUS_INTERNAL = 8,
} sfe_status;

/**
 * Opaque envelope-database handle.
 */
typedef struct sfe_db sfe_db;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sfe_version(void);

/**
 * Static human-readable message for a status code.
 */
const char *sfe_status_message(enum sfe_status status);

/**
 * Threshold membership value for a binarization parameter, exp(-k0^2/2).
 */
double sfe_binarize_threshold(double k0);

/**
 * Load an envelope database from a file.
 *
 * On success writes a handle to `out`; release it with
 * [`sfe_db_close`].
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to a valid
 * pointer slot.
 */
enum sfe_status sfe_db_open(const char *path, struct sfe_db **out);

/**
 * Parse an envelope database from an in-memory image.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` to a valid
 * pointer slot.
 */
enum sfe_status sfe_db_from_bytes(const uint8_t *bytes, size_t len, struct sfe_db **out);

/**
 * Release a database handle. A null handle is a no-op.
 *
 * # Safety
 * `db` must be a handle from this library that has not been closed.
 */
void sfe_db_close(struct sfe_db *db);

/**
 * Number of grid dimensions in the database (at most 7).
 *
 * # Safety
 * `db` must be a live handle and `out` a valid slot.
 */
enum sfe_status sfe_db_dim_count(const struct sfe_db *db, size_t *out);

/**
 * Name of grid dimension `index` as a string borrowed from the handle;
 * valid until the handle is closed.
 *
 * # Safety
 * `db` must be a live handle and `out` a valid slot.
 */
enum sfe_status sfe_db_dim_name(const struct sfe_db *db, size_t index, const char **out);

/**
 * Evaluate the envelope metric at a state.
 *
 * `state` is the fixed 7-vector described at the top of this header.
 * Writes the metric to `m_env`, its gradient along each grid dimension
 * to `j_env[0..dim_count]`, and 1 to `clamped` if the state was pulled
 * onto the grid boundary (0 otherwise). `j_env` and `clamped` may be
 * null when the caller does not want them.
 *
 * # Safety
 * `db` must be a live handle, `state` must point to 7 doubles, and
 * `j_env`, when given, must have room for `sfe_db_dim_count` doubles.
 */
enum sfe_status sfe_db_query_metric(const struct sfe_db *db,
                                    const double *state,
                                    double *m_env,
                                    double *j_env,
                                    int *clamped);

/**
 * Query the admissible intervals at the grid node nearest a state.
 *
 * On entry `count` holds the capacity of the `dims`, `lo`, and `hi`
 * buffers; on success it holds the number of protected dimensions
 * written. Each written `dims[k]` is an index into the grid dimension
 * list (see [`sfe_db_dim_name`]), with `lo[k]`/`hi[k]` the interval.
 * Fails with `SmallBuffer` (writing the needed capacity to `count`)
 * when the buffers are short. `clamped` may be null.
 *
 * # Safety
 * `db` must be a live handle, `state` must point to 7 doubles, and
 * `dims`, `lo`, `hi` must have the capacity announced in `count`.
 */
enum sfe_status sfe_db_query_constraints(const struct sfe_db *db,
                                         const double *state,
                                         size_t *dims,
                                         double *lo,
                                         double *hi,
                                         size_t *count,
                                         int *clamped);

/**
 * State-constraint protection: clamp each reference into
 * [x_min, x_max]. Any of the input and output pointers may alias.
 *
 * # Safety
 * All four arrays must hold `n` doubles.
 */
enum sfe_status sfe_scb_protect(const double *x_ref,
                                const double *x_min,
                                const double *x_max,
                                size_t n,
                                double *x_fep);

/**
 * Probabilistic protection: gradient compensation of the reference,
 * active when `m_env <= m0`. `k_fep` is the per-channel gain and
 * `j_env` the metric gradient along the protected channels.
 *
 * # Safety
 * `x_ref`, `k_fep`, `j_env`, and `x_fep` must hold `n` doubles.
 */
enum sfe_status sfe_prob_protect(const double *x_ref,
                                 size_t n,
                                 double m_env,
                                 double m0,
                                 const double *k_fep,
                                 const double *j_env,
                                 double *x_fep);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFE_H */
