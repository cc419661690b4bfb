#ifndef DRNET_H
#define DRNET_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of severity classes.
 */
#define DRNET_NUM_CLASSES 5

typedef enum DrnetStatus {
  DRNET_STATUS_OK = 0,
  DRNET_STATUS_NULL_POINTER = 1,
  DRNET_STATUS_INVALID_ARGUMENT = 2,
  DRNET_STATUS_IO = 3,
  DRNET_STATUS_DATA = 4,
  DRNET_STATUS_CONFIG = 5,
  DRNET_STATUS_NON_FINITE = 6,
  DRNET_STATUS_PANIC = 7,
} DrnetStatus;

/**
 * Opaque trained classifier.
 */
typedef struct DrnetClassifier DrnetClassifier;

typedef struct DrnetClassMetrics {
  double precision;
  double recall;
  double f1;
  uint64_t support;
} DrnetClassMetrics;

typedef struct DrnetReport {
  struct DrnetClassMetrics classes[DRNET_NUM_CLASSES];
  double accuracy;
  uint64_t total;
} DrnetReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next `drnet_*` call on this thread.
 */
const char *drnet_last_error(void);

/**
 * Static NUL-terminated library version.
 */
const char *drnet_version(void);

/**
 * Loads a classifier checkpoint written by `drnet train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DrnetStatus drnet_classifier_load(const char *path, struct DrnetClassifier **out);

/**
 * # Safety
 * `handle` must come from `drnet_classifier_load` and not be used afterwards.
 */
void drnet_classifier_free(struct DrnetClassifier *handle);

/**
 * Side length of the square input the classifier expects.
 *
 * # Safety
 * `handle` must be a live classifier.
 */
size_t drnet_classifier_input_size(const struct DrnetClassifier *handle);

/**
 * Classifies one image of `size * size` values in [-1, 1], row-major.
 * Writes the class probabilities to `probs` (`DRNET_NUM_CLASSES` values) and
 * the argmax to `class_out`; either may be null.
 *
 * # Safety
 * `pixels` must hold `size * size` floats; non-null outputs must be writable.
 */
enum DrnetStatus drnet_classifier_predict(const struct DrnetClassifier *handle,
                                          const float *pixels,
                                          size_t size,
                                          float *probs,
                                          uint32_t *class_out);

/**
 * Runs the default preprocessing chain on an image file and writes
 * `size * size` values in [-1, 1] to `out`, which holds `out_len` floats.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable for `out_len` floats.
 */
enum DrnetStatus drnet_preprocess_file(const char *path, size_t size, float *out, size_t out_len);

/**
 * Precision, recall and F1 from a row-major 5×5 confusion matrix
 * (rows are true classes, columns predictions).
 *
 * # Safety
 * `counts` must hold 25 values and `out` must be writable.
 */
enum DrnetStatus drnet_classification_report(const uint64_t *counts, struct DrnetReport *out);

/**
 * Learning rate of `epoch` for a step schedule dividing `initial` by 10
 * every 10 epochs.
 */
double drnet_lr_schedule(double initial, size_t epoch);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRNET_H */
