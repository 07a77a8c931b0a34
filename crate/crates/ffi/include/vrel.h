#ifndef VREL_H
#define VREL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VrelStatus {
  VREL_STATUS_OK = 0,
  VREL_STATUS_NULL_POINTER = 1,
  VREL_STATUS_INVALID_ARGUMENT = 2,
  VREL_STATUS_IO = 3,
  VREL_STATUS_CHECKPOINT = 4,
  VREL_STATUS_DATASET = 5,
  VREL_STATUS_SHAPE = 6,
  VREL_STATUS_NUMERIC = 7,
  VREL_STATUS_BUFFER_TOO_SMALL = 8,
  VREL_STATUS_PANIC = 9,
} VrelStatus;

// Doublet models score predicate classes; binary models score
// `[false, true]` for a given predicate.
typedef enum VrelMode {
  VREL_MODE_DOUBLET = 0,
  VREL_MODE_BINARY = 1,
} VrelMode;

// Opaque dataset with its rendered images.
typedef struct VrelDataset VrelDataset;

// Opaque trained model.
typedef struct VrelModel VrelModel;

typedef struct VrelModelInfo {
  enum VrelMode mode;
  size_t num_classes;
  size_t total_params;
  size_t trainable_params;
  // Mask grid width and height; 0 when mask attention is off.
  size_t mask_width;
  size_t mask_height;
} VrelModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *vrel_last_error(void);

// Library version as a static NUL-terminated string.
const char *vrel_version(void);

// Loads a checkpoint directory.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VrelStatus vrel_model_load(const char *path, struct VrelModel **out);

// # Safety
// `model` must come from [`vrel_model_load`] and not be used afterwards.
void vrel_model_free(struct VrelModel *model);

// # Safety
// `model` must be a live handle and `info` a valid pointer.
enum VrelStatus vrel_model_info(const struct VrelModel *model, struct VrelModelInfo *info);

// Loads a dataset directory and renders its images.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum VrelStatus vrel_dataset_load(const char *dir, struct VrelDataset **out);

// # Safety
// `dataset` must come from [`vrel_dataset_load`] and not be used afterwards.
void vrel_dataset_free(struct VrelDataset *dataset);

// Number of images in the dataset; 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t vrel_dataset_len(const struct VrelDataset *dataset);

// Class logits for one ordered object pair of an image. `predicate` is
// required for binary models and must be null for doublet models.
// `logits` receives `num_classes` values; `capacity` is its length.
//
// # Safety
// Handles must be live; `logits` must point to `capacity` writable doubles.
enum VrelStatus vrel_predict(const struct VrelModel *model,
                             const struct VrelDataset *dataset,
                             uint64_t image_id,
                             size_t subject,
                             size_t object,
                             const char *predicate,
                             double *logits,
                             size_t capacity);

// Scores a split: Recall@`k` for doublet models, overall accuracy for
// binary models (`k` is ignored). `split` is 0 for train, 1 for test.
//
// # Safety
// Handles must be live and `score` a valid pointer.
enum VrelStatus vrel_evaluate(const struct VrelModel *model,
                              const struct VrelDataset *dataset,
                              uint32_t split,
                              size_t k,
                              double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VREL_H */
