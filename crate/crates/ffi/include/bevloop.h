#ifndef BEVLOOP_H
#define BEVLOOP_H

/* Generated by cbindgen from bevloop-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every API call.
 */
typedef enum {
  BEVLOOP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BEVLOOP_STATUS_NULL_POINTER = 1,
  /**
   * An argument was malformed (bad stride, non-UTF-8 path, ...).
   */
  BEVLOOP_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The configuration text did not parse or validate.
   */
  BEVLOOP_STATUS_INVALID_CONFIG = 3,
  /**
   * A file could not be read or written.
   */
  BEVLOOP_STATUS_IO_ERROR = 4,
  /**
   * An unexpected internal failure; see the last error message.
   */
  BEVLOOP_STATUS_INTERNAL_ERROR = 5,
} BevloopStatus;

/**
 * Opaque loop-closure engine: the pipeline plus its database and history.
 */
typedef struct BevloopEngine BevloopEngine;

/**
 * Result of processing one scan. `has_loop` is 0 or 1; the remaining fields
 * are meaningful only when it is 1. The pose maps the candidate frame into
 * the query frame, meters and radians.
 */
typedef struct {
  uint8_t has_loop;
  uint64_t candidate_id;
  double score;
  double tx_m;
  double ty_m;
  double yaw_rad;
} BevloopLoopResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *bevloop_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *bevloop_version(void);

/**
 * Create an engine. `config_toml` may be null for the default configuration,
 * or hold TOML text with the same schema as the CLI configuration file.
 *
 * # Safety
 * `config_toml`, when non-null, must point to a NUL-terminated string;
 * `out_engine` must be a valid pointer. A returned engine must be released
 * with [`bevloop_engine_free`].
 */
BevloopStatus bevloop_engine_new(const char *config_toml, BevloopEngine **out_engine);

/**
 * Release an engine created by [`bevloop_engine_new`]. A null pointer is
 * accepted and ignored.
 *
 * # Safety
 * `engine` must be null or a pointer returned by [`bevloop_engine_new`]
 * that has not been freed yet.
 */
void bevloop_engine_free(BevloopEngine *engine);

/**
 * Process one scan given as an interleaved float array. `stride_floats` is
 * the number of floats per point (at least 3); coordinates are read from the
 * first three slots of each point (sensor frame, meters).
 *
 * # Safety
 * `engine` and `out_result` must be valid pointers; `points` must reference
 * at least `point_count * stride_floats` readable floats (it may be null
 * only when `point_count` is 0).
 */
BevloopStatus bevloop_engine_process_scan(BevloopEngine *engine,
                                          uint64_t scan_id,
                                          const float *points,
                                          uintptr_t point_count,
                                          uintptr_t stride_floats,
                                          BevloopLoopResult *out_result);

/**
 * Process one scan read from a KITTI-format `.bin` file.
 *
 * # Safety
 * `engine` and `out_result` must be valid pointers; `path` must point to a
 * NUL-terminated string.
 */
BevloopStatus bevloop_engine_process_scan_file(BevloopEngine *engine,
                                               uint64_t scan_id,
                                               const char *path,
                                               BevloopLoopResult *out_result);

/**
 * Number of scans processed so far.
 *
 * # Safety
 * `engine` must be a valid engine pointer or null (null yields 0).
 */
uint64_t bevloop_engine_scan_count(const BevloopEngine *engine);

/**
 * Write the retrieval database snapshot (little-endian, documented layout)
 * for warm restarts.
 *
 * # Safety
 * `engine` must be a valid engine pointer; `path` must point to a
 * NUL-terminated string.
 */
BevloopStatus bevloop_engine_save_database(const BevloopEngine *engine, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEVLOOP_H */
