#ifndef PRIORWARP_H
#define PRIORWARP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PwStatus {
  PW_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  PW_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or shapes disagreed.
   */
  PW_STATUS_ARGUMENT = 2,
  /**
   * A file or text did not match its expected format.
   */
  PW_STATUS_FORMAT = 3,
  /**
   * Non-finite values, a singular system or a diverged fit.
   */
  PW_STATUS_NUMERIC = 4,
  PW_STATUS_IO = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  PW_STATUS_PANIC = 6,
} PwStatus;

/**
 * A label map: one class index per voxel, 0 for background.
 */
typedef struct PwLabels PwLabels;

/**
 * Per-class shifts and control-point displacements.
 */
typedef struct PwParams PwParams;

/**
 * Prior logits, one channel per foreground class.
 */
typedef struct PwPrior PwPrior;

/**
 * Outcome of a fit, including its JSON serialization.
 */
typedef struct PwReport PwReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library and format versions as a static NUL-terminated string.
 */
const char *pw_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pw_last_error_message(char *buf, size_t len);

/**
 * Builds a label map from `h*w*d` labels laid out with `d` fastest.
 *
 * # Safety
 * `dims` points to 3 values, `labels` to their product, `out` is writable.
 */
enum PwStatus pw_labels_new(const size_t *dims, const uint8_t *labels, struct PwLabels **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PwStatus pw_labels_read(const char *path_, struct PwLabels **out);

/**
 * # Safety
 * `labels` is a live handle; `path` is a NUL-terminated string.
 */
enum PwStatus pw_labels_write(const struct PwLabels *labels, const char *path_);

/**
 * Writes `(h, w, d)` into `dims`.
 *
 * # Safety
 * `labels` is a live handle; `dims` points to 3 writable values.
 */
enum PwStatus pw_labels_dims(const struct PwLabels *labels, size_t *dims);

/**
 * Copies the labels into `buf`, which must hold `h*w*d` bytes.
 *
 * # Safety
 * `labels` is a live handle; `buf` points to `len` writable bytes.
 */
enum PwStatus pw_labels_copy(const struct PwLabels *labels, uint8_t *buf, size_t len);

/**
 * # Safety
 * `labels` is null or a handle not yet freed.
 */
void pw_labels_free(struct PwLabels *labels);

/**
 * Seeded near-uniform prior for `c_cls` classes.
 *
 * # Safety
 * `dims` points to 3 values; `out` is writable.
 */
enum PwStatus pw_prior_random(size_t c_cls,
                              const size_t *dims,
                              uint64_t seed,
                              struct PwPrior **out);

/**
 * Prior whose logits follow the signed distance to each class boundary.
 *
 * # Safety
 * `labels` is a live handle; `out` is writable.
 */
enum PwStatus pw_prior_from_labels(const struct PwLabels *labels,
                                   size_t c_cls,
                                   double slope,
                                   double cap,
                                   struct PwPrior **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PwStatus pw_prior_read(const char *path_, struct PwPrior **out);

/**
 * Writes the logits and their `.json` sidecar.
 *
 * # Safety
 * `prior` is a live handle; `path` is a NUL-terminated string.
 */
enum PwStatus pw_prior_write(const struct PwPrior *prior, const char *path_);

/**
 * # Safety
 * `prior` is null or a handle not yet freed.
 */
void pw_prior_free(struct PwPrior *prior);

/**
 * Fits shifts and displacements of `prior` to `target`. `config_json` may
 * be null for the desk defaults, or a JSON object of fit options; missing
 * keys keep their desk values.
 *
 * # Safety
 * Handles are live; `config_json` is null or NUL-terminated; `out` is writable.
 */
enum PwStatus pw_fit(const struct PwLabels *target,
                     const struct PwPrior *prior,
                     const char *config_json,
                     struct PwReport **out);

/**
 * Mean Dice of the fitted, deformed prior against the target.
 *
 * # Safety
 * `report` is a live handle; `dice` is writable.
 */
enum PwStatus pw_report_final_dice(const struct PwReport *report, double *dice);

/**
 * The report as JSON text, owned by the handle and valid until it is freed.
 *
 * # Safety
 * `report` is null or a live handle.
 */
const char *pw_report_json(const struct PwReport *report);

/**
 * Fitted parameters as a new handle.
 *
 * # Safety
 * `report` is a live handle; `out` is writable.
 */
enum PwStatus pw_report_params(const struct PwReport *report, struct PwParams **out);

/**
 * # Safety
 * `report` is null or a handle not yet freed.
 */
void pw_report_free(struct PwReport *report);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PwStatus pw_params_read(const char *path_, struct PwParams **out);

/**
 * # Safety
 * `params` is a live handle; `path` is a NUL-terminated string.
 */
enum PwStatus pw_params_write(const struct PwParams *params, const char *path_);

/**
 * Warps a label map with the parameters and re-hardens it.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum PwStatus pw_params_warp_labels(const struct PwParams *params,
                                    const struct PwLabels *labels,
                                    struct PwLabels **out);

/**
 * # Safety
 * `params` is null or a handle not yet freed.
 */
void pw_params_free(struct PwParams *params);

/**
 * Mean DSC, HD95 and NSD over classes `1..=c_cls` at the first map's
 * spacing. HD95 and NSD are NaN when no class is present in both maps.
 *
 * # Safety
 * Handles are live; the three outputs are writable.
 */
enum PwStatus pw_eval(const struct PwLabels *a,
                      const struct PwLabels *b,
                      size_t c_cls,
                      double tau,
                      double *dsc,
                      double *hd95,
                      double *nsd);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIORWARP_H */
