#ifndef SKILLGATE_H
#define SKILLGATE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  /**
   * A required pointer was null or an argument was out of range.
   */
  SG_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A string argument was not UTF-8.
   */
  SG_STATUS_UTF8 = 2,
  /**
   * JSON or a structured argument did not parse.
   */
  SG_STATUS_PARSE = 3,
  /**
   * The trust root is not locked.
   */
  SG_STATUS_UNLOCKED = 4,
  SG_STATUS_IO = 5,
  /**
   * The session halted; only the audit log remains readable.
   */
  SG_STATUS_ABORTED = 6,
  /**
   * A panic was caught at the boundary.
   */
  SG_STATUS_INTERNAL = 7,
} SgStatus;

typedef struct sg_session sg_session;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *sg_last_error_message(void);

/**
 * Library version as a static string; do not free.
 */
const char *sg_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void sg_string_free(char *s);

/**
 * Opens a session from a JSON options object:
 *
 * ```text
 * {"rootFile": "...", "corpus": "...", "skills": ["..."], "auditPath": "...",
 *  "broker": "deny-all", "policy": "...", "profile": "strict",
 *  "harness": false, "seed": 7, "clearance": "0::"}
 * ```
 *
 * Only `rootFile` and `corpus` are required. Skills that fail to load are
 * left out and reported by [`sg_session_rejected`].
 *
 * # Safety
 * `options_json` must be a valid C string and `out` a valid pointer.
 */
enum SgStatus sg_session_open(const char *options_json, struct sg_session **out);

/**
 * # Safety
 * `session` must be null or a handle from [`sg_session_open`] not yet freed.
 */
void sg_session_free(struct sg_session *session);

/**
 * Skills refused at open, as a JSON array of `{"path", "error"}`.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum SgStatus sg_session_rejected(struct sg_session *session, char **out);

/**
 * Sends one request envelope through the gate. `out` receives
 * `{"requestId", "outcome", "detail"}`.
 *
 * # Safety
 * `session` must be a live handle, `envelope_json` a valid C string and
 * `out` a valid pointer.
 */
enum SgStatus sg_session_dispatch(struct sg_session *session,
                                  const char *envelope_json,
                                  char **out);

/**
 * Applies staged reversible writes. `applied` may be null.
 *
 * # Safety
 * `session` must be a live handle; `applied` null or valid.
 */
enum SgStatus sg_session_commit(struct sg_session *session, size_t *applied);

/**
 * Discards staged reversible writes. `discarded` may be null.
 *
 * # Safety
 * `session` must be a live handle; `discarded` null or valid.
 */
enum SgStatus sg_session_rollback(struct sg_session *session, size_t *discarded);

/**
 * Closes the round. `out` receives `{"verdict": "pass"|"abort"|"not-checked", ...}`.
 * An abort verdict still returns `SG_STATUS_OK`; later calls return `SG_STATUS_ABORTED`.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum SgStatus sg_session_end_round(struct sg_session *session, char **out);

/**
 * The session's audit log as JSONL. Readable after an abort.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum SgStatus sg_session_audit_jsonl(struct sg_session *session, char **out);

/**
 * Verifies a JSONL audit log. `broken_at` gets -1 for an intact chain, or
 * the 0-indexed first bad record.
 *
 * # Safety
 * `jsonl` must be a valid C string and `broken_at` a valid pointer.
 */
enum SgStatus sg_audit_verify_text(const char *jsonl, int64_t *broken_at);

/**
 * 95% Wilson score interval for `k` successes in `n` trials, rounded to
 * three decimals.
 *
 * # Safety
 * `lo` and `hi` must be valid pointers.
 */
enum SgStatus sg_wilson_ci(uint64_t k, uint64_t n, double *lo, double *hi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLGATE_H */
