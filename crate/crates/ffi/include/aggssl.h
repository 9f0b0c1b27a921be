#ifndef AGGSSL_H
#define AGGSSL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum AggsslStatus {
  AGGSSL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  AGGSSL_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  AGGSSL_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad input: configuration, fixture, shapes, out-of-range index.
   */
  AGGSSL_STATUS_INVALID = 3,
  /**
   * Failure while running.
   */
  AGGSSL_STATUS_RUNTIME = 4,
  /**
   * A panic was caught at the boundary.
   */
  AGGSSL_STATUS_PANIC = 5,
} AggsslStatus;

/**
 * Manifest of a finished experiment run.
 */
typedef struct AggsslManifest AggsslManifest;

/**
 * Result of a greedy selection replay.
 */
typedef struct AggsslTrace AggsslTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *aggssl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aggssl_version(void);

/**
 * Linear CKA between row-major `a` (n×da) and `b` (n×db).
 *
 * # Safety
 * `a` and `b` must point to `n*da` and `n*db` readable doubles; `out` must
 * be writable.
 */
enum AggsslStatus aggssl_lcka(const double *a,
                              const double *b,
                              size_t n,
                              size_t da,
                              size_t db,
                              double *out);

/**
 * Same score through the feature-space formula.
 *
 * # Safety
 * As [`aggssl_lcka`].
 */
enum AggsslStatus aggssl_lcka_feature_form(const double *a,
                                           const double *b,
                                           size_t n,
                                           size_t da,
                                           size_t db,
                                           double *out);

/**
 * Replays the greedy selection over a fixture CSV.
 *
 * # Safety
 * `fixture_path` must be a NUL-terminated string; `out` must be writable.
 */
enum AggsslStatus aggssl_replay(const char *fixture_path, struct AggsslTrace **out);

/**
 * Number of iterations in the trace; 0 for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t aggssl_trace_len(const struct AggsslTrace *trace);

/**
 * Best accepted accuracy and number of selected tasks.
 *
 * # Safety
 * `trace` must be a live handle; the out pointers must be writable.
 */
enum AggsslStatus aggssl_trace_summary(const struct AggsslTrace *trace,
                                       double *best_acc,
                                       size_t *pool_size);

/**
 * One iteration: the selected task (owned by the handle), its accuracy and
 * whether it was kept.
 *
 * # Safety
 * `trace` must be a live handle; the out pointers must be writable.
 */
enum AggsslStatus aggssl_trace_iteration(const struct AggsslTrace *trace,
                                         size_t index,
                                         const char **selected,
                                         double *acc,
                                         bool *accepted);

/**
 * Releases a trace handle. Null is ignored.
 *
 * # Safety
 * `trace` must be null or a handle not yet freed.
 */
void aggssl_trace_free(struct AggsslTrace *trace);

/**
 * Runs the experiment described by a config file. `output_root` may be null
 * to write relative to the working directory.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum AggsslStatus aggssl_run_experiment(const char *config_path,
                                        const char *output_root,
                                        struct AggsslManifest **out);

/**
 * Run status ("ok" or "failed"), owned by the handle; null for a null
 * handle.
 *
 * # Safety
 * `manifest` must be null or a live handle.
 */
const char *aggssl_manifest_status(const struct AggsslManifest *manifest);

/**
 * The manifest as JSON, owned by the handle; null for a null handle.
 *
 * # Safety
 * `manifest` must be null or a live handle.
 */
const char *aggssl_manifest_json(const struct AggsslManifest *manifest);

/**
 * Looks up one metric by key.
 *
 * # Safety
 * `manifest` must be a live handle, `key` NUL-terminated, `out` writable.
 */
enum AggsslStatus aggssl_manifest_metric(const struct AggsslManifest *manifest,
                                         const char *key,
                                         double *out);

/**
 * Releases a manifest handle. Null is ignored.
 *
 * # Safety
 * `manifest` must be null or a handle not yet freed.
 */
void aggssl_manifest_free(struct AggsslManifest *manifest);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGGSSL_H */
