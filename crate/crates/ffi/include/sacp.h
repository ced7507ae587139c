#ifndef SACP_H
#define SACP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SacpStatus {
  SACP_STATUS_OK = 0,
  SACP_STATUS_NULL_POINTER = 1,
  /**
   * Bad dimensions, alpha outside (0, 1), invalid exponent, ...
   */
  SACP_STATUS_INVALID_ARGUMENT = 2,
  SACP_STATUS_INTERNAL = 3,
} SacpStatus;

typedef enum SacpAggregatorKind {
  SACP_AGGREGATOR_KIND_SUM = 0,
  SACP_AGGREGATOR_KIND_POWER = 1,
  SACP_AGGREGATOR_KIND_MIN = 2,
  SACP_AGGREGATOR_KIND_MAX = 3,
} SacpAggregatorKind;

/**
 * An aggregation function.
 */
typedef struct SacpAggregator SacpAggregator;

/**
 * Calibration score matrix (`n` rows, one column per model).
 */
typedef struct SacpCalibration SacpCalibration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sacp_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into the library on the same thread.
 */
const char *sacp_last_error(void);

/**
 * Copies an `n` x `k` row-major score matrix into a new handle.
 *
 * # Safety
 * `scores` must point to `n * k` doubles; `out` must be writable.
 */
enum SacpStatus sacp_calibration_new(const double *scores,
                                     size_t n,
                                     size_t k,
                                     struct SacpCalibration **out);

/**
 * # Safety
 * `cal` must come from [`sacp_calibration_new`] and not be used afterwards.
 */
void sacp_calibration_free(struct SacpCalibration *cal);

/**
 * Number of models (score columns) in a calibration handle; 0 for NULL.
 *
 * # Safety
 * `cal` must be NULL or a live handle.
 */
size_t sacp_calibration_models(const struct SacpCalibration *cal);

/**
 * `p` is read only for `Power`; a power of exactly 1 is the sum.
 *
 * # Safety
 * `out` must be writable.
 */
enum SacpStatus sacp_aggregator_new(enum SacpAggregatorKind kind,
                                    double p,
                                    struct SacpAggregator **out);

/**
 * Parses `sum`, `min`, `max` or `p=<x>`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum SacpStatus sacp_aggregator_parse(const char *text, struct SacpAggregator **out);

/**
 * Writes the aggregator's canonical name into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full name length excluding the NUL.
 *
 * # Safety
 * `agg` must be a live handle; `buf` must hold `len` bytes or be NULL with `len == 0`.
 */
size_t sacp_aggregator_name(const struct SacpAggregator *agg, char *buf, size_t len);

/**
 * # Safety
 * `agg` must come from an aggregator constructor and not be used afterwards.
 */
void sacp_aggregator_free(struct SacpAggregator *agg);

/**
 * Classification set. `test_scores` holds one row of K scores per class
 * (`n_classes` x K); `out_mask[c]` is set to 1 if class `c` is accepted.
 *
 * # Safety
 * Handles must be live; buffers must have the stated sizes.
 */
enum SacpStatus sacp_classify(const struct SacpCalibration *cal,
                              const struct SacpAggregator *agg,
                              double alpha,
                              const double *test_scores,
                              size_t n_classes,
                              uint8_t *out_mask);

/**
 * Regression set on the uniform grid `[grid_lo, grid_hi]` with `grid_len`
 * points, for absolute-residual scores. `predictions` holds one value per model.
 *
 * # Safety
 * Handles must be live; `predictions` holds K doubles, `out_mask` `grid_len`
 * bytes; `out_length` may be NULL.
 */
enum SacpStatus sacp_regress(const struct SacpCalibration *cal,
                             const struct SacpAggregator *agg,
                             double alpha,
                             const double *predictions,
                             double grid_lo,
                             double grid_hi,
                             size_t grid_len,
                             uint8_t *out_mask,
                             double *out_length);

/**
 * Exact membership of target `y` (no grid); writes 1 or 0 to `out_accept`.
 *
 * # Safety
 * Handles must be live; `predictions` holds K doubles.
 */
enum SacpStatus sacp_membership_exact(const struct SacpCalibration *cal,
                                      const struct SacpAggregator *agg,
                                      double alpha,
                                      const double *predictions,
                                      double y,
                                      uint8_t *out_accept);

/**
 * Picks the exponent with the smallest average regression set length over
 * `n_test` unlabeled test points (`n_test` x K predictions). The candidates
 * are `p_count` evenly spaced exponents on `[p_lo, p_hi]` plus the sum, min
 * and max. The chosen aggregator is returned as a new handle.
 *
 * # Safety
 * `cal` must be live; `predictions` holds `n_test * K` doubles; `out` must be writable.
 */
enum SacpStatus sacp_select_p_regression(const struct SacpCalibration *cal,
                                         double alpha,
                                         const double *predictions,
                                         size_t n_test,
                                         double grid_lo,
                                         double grid_hi,
                                         size_t grid_len,
                                         double p_lo,
                                         double p_hi,
                                         size_t p_count,
                                         struct SacpAggregator **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SACP_H */
