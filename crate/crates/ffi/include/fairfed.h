#ifndef FAIRFED_H
#define FAIRFED_H

#pragma once

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FfStatus {
  FF_STATUS_OK = 0,
  FF_STATUS_INVALID_INPUT = 1,
  FF_STATUS_DIMENSION_MISMATCH = 2,
  FF_STATUS_CONFIG = 3,
  FF_STATUS_DATA = 4,
  FF_STATUS_NUMERICAL = 5,
  FF_STATUS_VERIFICATION = 6,
  FF_STATUS_IO = 7,
  FF_STATUS_JSON = 8,
  FF_STATUS_CSV = 9,
  FF_STATUS_NULL_POINTER = 10,
  FF_STATUS_BUFFER_TOO_SMALL = 11,
  FF_STATUS_PANIC = 12,
} FfStatus;

/**
 * Reporting level for [`ff_trainer_evaluate`].
 */
typedef enum FfLevel {
  FF_LEVEL_ATTRIBUTE = 0,
  FF_LEVEL_CLIENT = 1,
} FfLevel;

/**
 * A federated dataset.
 */
typedef struct FfDataset FfDataset;

/**
 * A training run: config, model, its own copy of the data and the server state.
 */
typedef struct FfTrainer FfTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ff_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ff_version(void);

/**
 * Euclidean projection of `v[0..len]` onto the probability simplex, written to `out`.
 *
 * # Safety
 * `v` and `out` must point to `len` doubles.
 */
enum FfStatus ff_project_simplex(const double *v, size_t len, double *out);

/**
 * Entropic mirror step `lambda * exp(step * g)`, normalised, written to `out`.
 *
 * # Safety
 * `lambda`, `g` and `out` must point to `len` doubles.
 */
enum FfStatus ff_mirror_step(const double *lambda,
                             const double *g,
                             size_t len,
                             double step,
                             double *out);

/**
 * Runs the oracle suite; `all_passed` receives 1 or 0.
 *
 * # Safety
 * `all_passed` must be writable.
 */
enum FfStatus ff_verify(uint64_t seed, size_t trials, int32_t *all_passed);

/**
 * Generates a synthetic dataset from a partition spec in JSON.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string and `out` writable.
 */
enum FfStatus ff_dataset_generate(const char *spec_json, uint64_t seed, struct FfDataset **out);

/**
 * Reads a dataset container and its sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum FfStatus ff_dataset_read(const char *path, struct FfDataset **out);

/**
 * Writes a dataset container and its sidecar.
 *
 * # Safety
 * `ds` must come from this library and `path` be a NUL-terminated string.
 */
enum FfStatus ff_dataset_write(const struct FfDataset *ds, const char *path);

/**
 * Number of clients, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or come from this library.
 */
size_t ff_dataset_client_count(const struct FfDataset *ds);

/**
 * Total number of samples, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or come from this library.
 */
size_t ff_dataset_sample_count(const struct FfDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void ff_dataset_free(struct FfDataset *ds);

/**
 * Creates a run from a run config and a model spec, both JSON. The dataset is copied.
 *
 * # Safety
 * Strings must be NUL-terminated, `ds` must come from this library and `out` be writable.
 */
enum FfStatus ff_trainer_new(const char *run_json,
                             const char *model_json,
                             const struct FfDataset *ds,
                             struct FfTrainer **out);

/**
 * Runs `rounds` further communication rounds.
 *
 * # Safety
 * `t` must come from this library.
 */
enum FfStatus ff_trainer_run(struct FfTrainer *t, size_t rounds);

/**
 * Rounds completed so far, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or come from this library.
 */
uint64_t ff_trainer_round(const struct FfTrainer *t);

/**
 * Copies the group weights into `out`. `needed` (optional) receives their count;
 * a short buffer yields `BufferTooSmall` with `needed` still set.
 *
 * # Safety
 * `out` must hold `capacity` doubles; `needed` may be null.
 */
enum FfStatus ff_trainer_lambda(const struct FfTrainer *t,
                                double *out,
                                size_t capacity,
                                size_t *needed);

/**
 * Copies the model parameters into `out`, as [`ff_trainer_lambda`].
 *
 * # Safety
 * `out` must hold `capacity` doubles; `needed` may be null.
 */
enum FfStatus ff_trainer_theta(const struct FfTrainer *t,
                               double *out,
                               size_t capacity,
                               size_t *needed);

/**
 * Writes a resumable checkpoint, including the model spec.
 *
 * # Safety
 * `t` must come from this library and `path` be a NUL-terminated string.
 */
enum FfStatus ff_trainer_save_checkpoint(const struct FfTrainer *t, const char *path);

/**
 * Evaluates the current model on `ds` and returns the metrics report as a JSON
 * string, to be released with [`ff_string_free`].
 *
 * # Safety
 * Handles must come from this library and `json_out` be writable.
 */
enum FfStatus ff_trainer_evaluate(const struct FfTrainer *t,
                                  const struct FfDataset *ds,
                                  enum FfLevel level,
                                  char **json_out);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void ff_string_free(char *s);

/**
 * # Safety
 * `t` must be null or a handle not yet freed.
 */
void ff_trainer_free(struct FfTrainer *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRFED_H */
