#ifndef HEMISEG_H
#define HEMISEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_SHAPE = 3,
  HS_STATUS_DATA = 4,
  HS_STATUS_IO = 5,
  HS_STATUS_NUMERICAL = 6,
  HS_STATUS_PANIC = 7,
} HsStatus;

// Two or more models combined by majority vote.
typedef struct HsEnsemble HsEnsemble;

// A trained or freshly initialized network.
typedef struct HsModel HsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty after a
// success. Valid until the next call into this library on the same thread.
const char *hs_last_error(void);

// Library version as a static NUL-terminated string.
const char *hs_version(void);

// Trainable parameter count for the default architecture at `filter_rate`.
enum HsStatus hs_count_parameters(double filter_rate, size_t *out);

// Freshly initialized model (untrained); mostly useful for testing bindings.
enum HsStatus hs_model_new(double filter_rate, uint64_t seed, struct HsModel **out);

// Loads a checkpoint written by `hemiseg train`.
enum HsStatus hs_model_load(const char *path, struct HsModel **out);

enum HsStatus hs_model_save(const struct HsModel *model, const char *path);

enum HsStatus hs_model_num_parameters(const struct HsModel *model, size_t *out);

// Releases a model; null is ignored.
void hs_model_free(struct HsModel *model);

// Segments one volume (standardized internally) into labels 0/1/2
// written to `out_labels`, which must hold `d * h * w` bytes. Extents must
// be divisible by 16.
enum HsStatus hs_segment(const struct HsModel *model,
                         const double *values,
                         size_t d,
                         size_t h,
                         size_t w,
                         const double *spacing,
                         uint8_t *out_labels,
                         size_t out_len);

// Builds an ensemble from copies of `n` models (n >= 2); the inputs stay
// owned by the caller.
enum HsStatus hs_ensemble_new(const struct HsModel *const *models,
                              size_t n,
                              struct HsEnsemble **out);

void hs_ensemble_free(struct HsEnsemble *ensemble);

// Majority-vote segmentation; same buffer contract as [`hs_segment`].
enum HsStatus hs_ensemble_segment(const struct HsEnsemble *ensemble,
                                  const double *values,
                                  size_t d,
                                  size_t h,
                                  size_t w,
                                  const double *spacing,
                                  uint8_t *out_labels,
                                  size_t out_len);

// Dice overlap of two masks given as bytes (nonzero = inside).
enum HsStatus hs_dice(const uint8_t *a,
                      const uint8_t *b,
                      size_t d,
                      size_t h,
                      size_t w,
                      double *out);

// Symmetric boundary Hausdorff distance in mm; `spacing` points to
// `(sd, sh, sw)`. Fails on an empty mask.
enum HsStatus hs_hausdorff_mm(const uint8_t *a,
                              const uint8_t *b,
                              size_t d,
                              size_t h,
                              size_t w,
                              const double *spacing,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEMISEG_H */
