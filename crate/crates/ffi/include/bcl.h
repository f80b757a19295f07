#ifndef BCL_FFI_H
#define BCL_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum BclStatus {
  BCL_STATUS_OK = 0,
  BCL_STATUS_INVALID_ARGUMENT = 1,
  BCL_STATUS_RUNTIME_ERROR = 2,
  BCL_STATUS_IO_ERROR = 3,
} BclStatus;

/**
 * Opaque per-sample loss table.
 */
typedef struct BclMemTable BclMemTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bcl_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *bcl_last_error(void);

/**
 * Create a loss table for `n` samples with smoothing factor `beta`.
 *
 * # Safety
 * `out` must be a valid pointer to a writable handle slot.
 */
enum BclStatus bcl_memtable_new(size_t n, double beta, struct BclMemTable **out);

/**
 * Release a table handle. Null is a no-op.
 *
 * # Safety
 * `table` must have come from this library and not be freed twice.
 */
void bcl_memtable_free(struct BclMemTable *table);

/**
 * Fold one epoch of per-sample losses (dense over sample ids 0..n).
 *
 * # Safety
 * `losses` must point to `n` readable doubles; `table` must be live.
 */
enum BclStatus bcl_memtable_record_epoch(struct BclMemTable *table, const double *losses, size_t n);

/**
 * Normalize momentum losses and copy the `n` scores into `out`.
 *
 * # Safety
 * `out` must point to `n` writable doubles; `table` must be live.
 */
enum BclStatus bcl_memtable_scores(struct BclMemTable *table, double *out, size_t n);

/**
 * Last folded epoch, or -1 before the first fold.
 *
 * # Safety
 * `table` must be live.
 */
int64_t bcl_memtable_epoch(const struct BclMemTable *table);

/**
 * Persist the table to `path`.
 *
 * # Safety
 * `table` must be live; `path` must be a NUL-terminated string.
 */
enum BclStatus bcl_memtable_save(const struct BclMemTable *table, const char *path);

/**
 * Load a table from `path`. `expect_n = 0` skips the sample-count check.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum BclStatus bcl_memtable_load(const char *path, size_t expect_n, struct BclMemTable **out);

/**
 * Closed-form long-tailed class counts for `classes` classes under the
 * given imbalance factor, written into `out_counts`.
 *
 * # Safety
 * `out_counts` must point to `classes` writable size_t slots.
 */
enum BclStatus bcl_long_tailed_counts(size_t n_max,
                                      size_t classes,
                                      double imbalance,
                                      size_t *out_counts);

/**
 * Apply score-boosted augmentation in place to an interleaved HWC RGB
 * buffer: `k` ops drawn without replacement, each triggering with
 * probability `score` at strength `score * U(0,1)`. The stream is keyed
 * by (seed, sample_id, epoch, view), matching the training pipeline.
 *
 * # Safety
 * `pixels` must point to `height * width * 3` writable bytes.
 */
enum BclStatus bcl_boosted_augment(uint8_t *pixels,
                                   size_t height,
                                   size_t width,
                                   double score,
                                   size_t k,
                                   uint64_t seed,
                                   uint32_t sample_id,
                                   uint64_t epoch,
                                   uint32_t view);

/**
 * Run a full pretraining job from a JSON config file (same schema as the
 * `bcl pretrain` subcommand; the run directory comes from the config).
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum BclStatus bcl_run_pretrain(const char *config_path);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BCL_FFI_H */
