#ifndef FEDLPS_H
#define FEDLPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FlpsStatus {
  FLPS_STATUS_OK = 0,
  FLPS_STATUS_NULL_POINTER = 1,
  FLPS_STATUS_INVALID_UTF8 = 2,
  FLPS_STATUS_CONFIG = 3,
  FLPS_STATUS_IO = 4,
  FLPS_STATUS_NUMERIC = 5,
  FLPS_STATUS_STRUCTURAL = 6,
  FLPS_STATUS_PARSE = 7,
  FLPS_STATUS_PANIC = 8,
} FlpsStatus;

// A standalone ratio bandit with its own random stream.
typedef struct FlpsBandit FlpsBandit;

// A running simulation.
typedef struct FlpsSimulation FlpsSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *flps_last_error(void);

// Library version as a static NUL-terminated string.
const char *flps_version(void);

// Release a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void flps_string_free(char *s);

// Build a simulation from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum FlpsStatus flps_simulation_new(const char *toml, struct FlpsSimulation **out);

// # Safety
// `sim` must come from `flps_simulation_new` and not have been freed.
void flps_simulation_free(struct FlpsSimulation *sim);

// Run one round. `global_cost` (may be NULL) receives the round's duration.
//
// # Safety
// `sim` must be a live handle; `global_cost` NULL or writable.
enum FlpsStatus flps_simulation_step(struct FlpsSimulation *sim, double *global_cost);

// Run all remaining rounds.
//
// # Safety
// `sim` must be a live handle.
enum FlpsStatus flps_simulation_run(struct FlpsSimulation *sim);

// Rounds completed so far.
//
// # Safety
// `sim` must be a live handle; `out` writable.
enum FlpsStatus flps_simulation_round(const struct FlpsSimulation *sim, uintptr_t *out);

// Mean personalised test accuracy over all clients, in percent.
//
// # Safety
// `sim` must be a live handle; `out` writable.
enum FlpsStatus flps_simulation_mean_accuracy(const struct FlpsSimulation *sim, double *out);

// Metrics CSV so far. Free the result with `flps_string_free`.
//
// # Safety
// `sim` must be a live handle; `out` writable.
enum FlpsStatus flps_simulation_metrics_csv(const struct FlpsSimulation *sim, char **out);

// Run manifest as JSON. Free the result with `flps_string_free`.
//
// # Safety
// `sim` must be a live handle; `out` writable.
enum FlpsStatus flps_simulation_manifest_json(const struct FlpsSimulation *sim, char **out);

// Create a bandit over `[s_min, 1)` split into `partitions` intervals.
//
// # Safety
// `out` must be writable.
enum FlpsStatus flps_bandit_new(uintptr_t partitions,
                                double s_min,
                                uintptr_t rounds,
                                uintptr_t clients,
                                double client_fraction,
                                double rho,
                                uint64_t seed,
                                struct FlpsBandit **out);

// # Safety
// `b` must come from `flps_bandit_new` and not have been freed.
void flps_bandit_free(struct FlpsBandit *b);

// The ratio the bandit currently proposes.
//
// # Safety
// `b` must be a live handle; `out` writable.
enum FlpsStatus flps_bandit_ratio(const struct FlpsBandit *b, double *out);

// Report the accuracy (percent) and local cost observed at the proposed
// ratio; `next_ratio` receives the next proposal.
//
// # Safety
// `b` must be a live handle; `next_ratio` writable.
enum FlpsStatus flps_bandit_update(struct FlpsBandit *b,
                                   double accuracy,
                                   double cost,
                                   double delta,
                                   double *next_ratio);

// Number of live partitions, or 0 for a NULL handle.
//
// # Safety
// `b` must be NULL or a live handle.
uintptr_t flps_bandit_partition_count(const struct FlpsBandit *b);

// `U(a) = 10 - 20 / (1 + e^{0.35 a})`.
double flps_utility(double accuracy);

// `(U(a) - U(a_prev)) / cost`; fails when `cost <= 0`.
//
// # Safety
// `out` must be writable.
enum FlpsStatus flps_reward(double accuracy, double prev_accuracy, double cost, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLPS_H */
