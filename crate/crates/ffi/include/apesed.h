#ifndef APESED_H
#define APESED_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ApesedStatus {
  APESED_STATUS_OK = 0,
  APESED_STATUS_NULL_POINTER = 1,
  APESED_STATUS_INVALID_ARGUMENT = 2,
  APESED_STATUS_IO = 3,
  /**
   * Malformed or unsupported file contents.
   */
  APESED_STATUS_FORMAT = 4,
  APESED_STATUS_DIM_MISMATCH = 5,
  /**
   * Checkpoint does not fit the request.
   */
  APESED_STATUS_INCOMPATIBLE = 6,
  APESED_STATUS_NO_POSITIVES = 7,
  /**
   * Any other data error.
   */
  APESED_STATUS_DATA = 8,
  APESED_STATUS_BUFFER_TOO_SMALL = 9,
  /**
   * A Rust panic was caught at the boundary.
   */
  APESED_STATUS_PANIC = 10,
} ApesedStatus;

/**
 * Contents of an APEF feature file.
 */
typedef struct ApesedFeatures ApesedFeatures;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct ApesedModel ApesedModel;

/**
 * Detected call segments of one clip.
 */
typedef struct ApesedSegments ApesedSegments;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next apesed call on the same thread.
 */
const char *apesed_last_error(void);

/**
 * Library version as a static string.
 */
const char *apesed_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum ApesedStatus apesed_model_load(const char *path, struct ApesedModel **out);

/**
 * # Safety
 * `model` must come from [`apesed_model_load`] and not be used afterwards.
 */
void apesed_model_free(struct ApesedModel *model);

/**
 * Number of output classes, including the non-call class. Zero for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t apesed_model_num_classes(const struct ApesedModel *model);

/**
 * Feature dimension the model expects per frame. Zero for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t apesed_model_input_dim(const struct ApesedModel *model);

/**
 * Frame posteriors for a row-major `num_frames x dim` feature buffer.
 * `out` receives `num_frames x num_classes` probabilities.
 *
 * # Safety
 * `features` must hold `num_frames * dim` floats and `out` `out_len`.
 */
enum ApesedStatus apesed_model_posteriors(const struct ApesedModel *model,
                                          const float *features,
                                          size_t num_frames,
                                          size_t dim,
                                          float *out,
                                          size_t out_len);

/**
 * Runs the model over a WAV file and collects call segments lasting at
 * least `min_dur` seconds. Models on external features are rejected.
 *
 * # Safety
 * `model` must be live, `wav_path` nul-terminated and `out` valid.
 */
enum ApesedStatus apesed_detect_wav(const struct ApesedModel *model,
                                    const char *wav_path,
                                    double min_dur,
                                    struct ApesedSegments **out);

/**
 * Number of segments. Zero for null.
 *
 * # Safety
 * `segs` must be null or a live handle.
 */
size_t apesed_segments_len(const struct ApesedSegments *segs);

/**
 * Fields of segment `index`: times in seconds, class index and mean
 * posterior of that class. Any output pointer may be null.
 *
 * # Safety
 * `segs` must be live; non-null outputs must be valid.
 */
enum ApesedStatus apesed_segments_get(const struct ApesedSegments *segs,
                                      size_t index,
                                      double *start,
                                      double *end,
                                      size_t *label,
                                      double *confidence);

/**
 * Class name of segment `index`, owned by the handle; null when out of
 * range.
 *
 * # Safety
 * `segs` must be null or a live handle.
 */
const char *apesed_segments_label_name(const struct ApesedSegments *segs, size_t index);

/**
 * # Safety
 * `segs` must come from [`apesed_detect_wav`] and not be used afterwards.
 */
void apesed_segments_free(struct ApesedSegments *segs);

/**
 * Reads an APEF feature file.
 *
 * # Safety
 * `path` must be nul-terminated and `out` valid.
 */
enum ApesedStatus apesed_features_read(const char *path, struct ApesedFeatures **out);

/**
 * # Safety
 * `f` must be null or a live handle.
 */
size_t apesed_features_num_frames(const struct ApesedFeatures *f);

/**
 * # Safety
 * `f` must be null or a live handle.
 */
size_t apesed_features_dim(const struct ApesedFeatures *f);

/**
 * Row-major frame values, owned by the handle.
 *
 * # Safety
 * `f` must be null or a live handle.
 */
const float *apesed_features_data(const struct ApesedFeatures *f);

/**
 * # Safety
 * `f` must come from [`apesed_features_read`] and not be used afterwards.
 */
void apesed_features_free(struct ApesedFeatures *f);

/**
 * Average precision of `scores` against 0/1 `positives`.
 *
 * # Safety
 * Both arrays must hold `n` elements and `out` must be valid.
 */
enum ApesedStatus apesed_aucpr(const double *scores,
                               const uint8_t *positives,
                               size_t n,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APESED_H */
