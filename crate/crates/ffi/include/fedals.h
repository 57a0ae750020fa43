#ifndef FEDALS_H
#define FEDALS_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedalsStatus {
  FEDALS_STATUS_OK = 0,
  FEDALS_STATUS_NULL_POINTER = 1,
  FEDALS_STATUS_INVALID_UTF8 = 2,
  FEDALS_STATUS_INVALID_CONFIG = 3,
  FEDALS_STATUS_DIVERGED = 4,
  FEDALS_STATUS_INSUFFICIENT_TRIALS = 5,
  FEDALS_STATUS_FAILED = 6,
  FEDALS_STATUS_PANIC = 7,
} FedalsStatus;

/**
 * A parsed experiment configuration plus the metrics of its last run.
 */
typedef struct FedalsExperiment FedalsExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next call
 * into the library from the same thread; never null.
 */
const char *fedals_last_error(void);

/**
 * Library version, static storage.
 */
const char *fedals_version(void);

/**
 * Parse a TOML experiment configuration into a new handle.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum FedalsStatus fedals_experiment_new(const char *config_toml, struct FedalsExperiment **out);

/**
 * Run one seed. On success `summary_json` receives the run summary and the
 * metrics rows become available through [`fedals_experiment_metrics`].
 *
 * # Safety
 * `exp` must come from [`fedals_experiment_new`]; `summary_json` must be writable.
 */
enum FedalsStatus fedals_experiment_run(struct FedalsExperiment *exp,
                                        uint64_t seed,
                                        size_t workers,
                                        char **summary_json);

/**
 * JSONL metrics rows of the last successful run.
 *
 * # Safety
 * `exp` must be a live handle; `out` must be writable.
 */
enum FedalsStatus fedals_experiment_metrics(const struct FedalsExperiment *exp, char **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `exp` must come from [`fedals_experiment_new`] and not be used afterwards.
 */
void fedals_experiment_free(struct FedalsExperiment *exp);

/**
 * Run the bound check for a JSON-encoded trial configuration. `pass`
 * receives the verdict and `report_json` the full report.
 *
 * # Safety
 * `config_json` must be NUL-terminated; out-pointers must be writable.
 */
enum FedalsStatus fedals_verify_bound(const char *config_json, bool *pass, char **report_json);

/**
 * Parameters communicated per client per direction over `rounds` rounds for
 * a layout with `representation` and `head` parameters.
 *
 * # Safety
 * `out` must be writable.
 */
enum FedalsStatus fedals_comm_count(size_t tau,
                                    size_t alpha,
                                    size_t rounds,
                                    size_t representation,
                                    size_t head,
                                    bool adaptive,
                                    uint64_t *out);

/**
 * Whether head (`head = true`) or representation blocks sync after global
 * step `step`. Returns false for invalid schedules.
 */
bool fedals_sync_due(size_t step, size_t tau, size_t alpha, bool head);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void fedals_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDALS_H */
