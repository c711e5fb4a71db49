#ifndef SEDTRIADV_H
#define SEDTRIADV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SedStatus {
  SED_STATUS_OK = 0,
  SED_STATUS_NULL_POINTER = 1,
  SED_STATUS_INVALID_UTF8 = 2,
  SED_STATUS_IO = 3,
  SED_STATUS_CONFIG = 4,
  SED_STATUS_CHECKPOINT = 5,
  SED_STATUS_INVALID_AUDIO = 6,
  SED_STATUS_SHAPE = 7,
  SED_STATUS_OUT_OF_RANGE = 8,
  SED_STATUS_BUFFER_TOO_SMALL = 9,
  SED_STATUS_NON_FINITE = 10,
  SED_STATUS_PANIC = 11,
  SED_STATUS_OTHER = 12,
} SedStatus;

/**
 * Frame probabilities and decoded events of one clip.
 */
typedef struct SedPrediction SedPrediction;

/**
 * A loaded model plus its preprocessing and decoding settings.
 */
typedef struct SedRun SedRun;

/**
 * One decoded event.
 */
typedef struct SedEvent {
  uint32_t class_id;
  double onset_s;
  double offset_s;
} SedEvent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *sed_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sed_version(void);

/**
 * Loads a run directory. `checkpoint` may be null for `final.ckpt`.
 *
 * # Safety
 * `dir` and a non-null `checkpoint` must be NUL-terminated strings; `out`
 * must be writable.
 */
enum SedStatus sed_run_load(const char *dir, const char *checkpoint, struct SedRun **out);

/**
 * # Safety
 * `run` must come from [`sed_run_load`] and not be freed twice. Null is a
 * no-op.
 */
void sed_run_free(struct SedRun *run);

/**
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SedStatus sed_run_n_classes(const struct SedRun *run, size_t *out);

/**
 * Name of class `k`, owned by the run handle.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SedStatus sed_run_class_name(const struct SedRun *run, size_t k, const char **out);

/**
 * Runs the front-end, the target classifier and the decoder on mono
 * samples in [-1, 1] at `sample_rate_hz`.
 *
 * # Safety
 * `run` must be a live handle; `samples` must point to `n_samples` floats;
 * `out` must be writable.
 */
enum SedStatus sed_run_predict(const struct SedRun *run,
                               const float *samples,
                               size_t n_samples,
                               uint32_t sample_rate_hz,
                               struct SedPrediction **out);

/**
 * # Safety
 * `pred` must come from [`sed_run_predict`] and not be freed twice. Null
 * is a no-op.
 */
void sed_prediction_free(struct SedPrediction *pred);

/**
 * # Safety
 * `pred` must be a live handle; `out` must be writable.
 */
enum SedStatus sed_prediction_n_events(const struct SedPrediction *pred, size_t *out);

/**
 * # Safety
 * `pred` must be a live handle; `out` must be writable.
 */
enum SedStatus sed_prediction_event(const struct SedPrediction *pred,
                                    size_t i,
                                    struct SedEvent *out);

/**
 * Frame count, class count and frame hop (seconds) of the probabilities.
 *
 * # Safety
 * `pred` must be a live handle; each non-null output must be writable.
 */
enum SedStatus sed_prediction_shape(const struct SedPrediction *pred,
                                    size_t *n_frames,
                                    size_t *n_classes,
                                    double *frame_hop_s);

/**
 * Copies row-major `[n_frames, n_classes]` frame probabilities into `buf`.
 *
 * # Safety
 * `pred` must be a live handle; `buf` must hold `cap` floats.
 */
enum SedStatus sed_prediction_frame_probs(const struct SedPrediction *pred, float *buf, size_t cap);

/**
 * Copies the `n_classes` clip probabilities into `buf`.
 *
 * # Safety
 * `pred` must be a live handle; `buf` must hold `cap` floats.
 */
enum SedStatus sed_prediction_clip_probs(const struct SedPrediction *pred, float *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEDTRIADV_H */
