#ifndef COPL_H
#define COPL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define COPL_OK 0

#define COPL_ERR_NULL_POINTER 1

#define COPL_ERR_INVALID_ARGUMENT 2

#define COPL_ERR_NUMERICAL 3

#define COPL_ERR_IO 4

#define COPL_ERR_FORMAT 5

#define COPL_ERR_SHAPE 6

#define COPL_ERR_PANIC 7

// Label spaces accepted by [`copl_model_classify`].
#define COPL_SPLIT_BASE 0

#define COPL_SPLIT_NEW 1

#define COPL_SPLIT_ALL 2

// Generated or loaded samples with their class partition.
typedef struct CoplDataset CoplDataset;

// Learned prompt parameters together with the frozen encoders and class
// embeddings of the dataset they were trained on.
typedef struct CoplModel CoplModel;

// One evaluation result. Absent accuracies are reported as NaN with the
// matching `has_*` flag cleared.
typedef struct {
  uint64_t seed;
  bool has_seen;
  double seen_acc;
  bool has_unseen;
  double unseen_acc;
  bool has_hm;
  double hm;
} CoplMetricRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *copl_version(void);

// Copy of the last error message on this thread, or NULL if the last call
// succeeded. Release with [`copl_string_free`].
char *copl_last_error_message(void);

// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void copl_string_free(char *s);

// # Safety
// `out` must be valid for writes.
int32_t copl_harmonic_mean(double a, double b, double *out);

// Generates a dataset from a JSON descriptor; NULL uses the defaults.
//
// # Safety
// `descriptor_json` must be NULL or a NUL-terminated string; `out` must be
// valid for writes.
int32_t copl_dataset_generate(const char *descriptor_json, CoplDataset **out);

// Loads a CPFC1 feature cache. Classes are split into base and new by a
// seeded partition with `split_fraction` base classes.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
int32_t copl_dataset_load(const char *path,
                          double split_fraction,
                          uint64_t seed,
                          CoplDataset **out);

// Writes the dataset as a CPFC1 feature cache.
//
// # Safety
// `dataset` must be a live handle; `path` a NUL-terminated string.
int32_t copl_dataset_save(const CoplDataset *dataset, const char *path);

// Number of classes, base classes, samples, patches per sample and patch
// dimension. Any output pointer may be NULL.
//
// # Safety
// `dataset` must be a live handle; non-NULL outputs must be valid for writes.
int32_t copl_dataset_shape(const CoplDataset *dataset,
                           size_t *num_classes,
                           size_t *num_base,
                           size_t *num_samples,
                           size_t *patches,
                           size_t *image_dim);

// Label of sample `index` and a pointer to its row-major `patches ×
// image_dim` features, valid until the dataset is freed.
//
// # Safety
// `dataset` must be a live handle; outputs must be valid for writes.
int32_t copl_dataset_sample(const CoplDataset *dataset,
                            size_t index,
                            size_t *label,
                            const double **features);

// # Safety
// `dataset` must be NULL or a handle not yet freed.
void copl_dataset_free(CoplDataset *dataset);

// Trains `method` on the base classes. `run_config_json` is NULL for
// defaults or a JSON object of run settings (`prompt_len`, `token_dim`,
// `joint_dim`, `gamma`, `shots`, `sgd`, ...).
//
// # Safety
// `dataset` must be a live handle; strings NUL-terminated or NULL where
// allowed; `out` valid for writes.
int32_t copl_model_train(const CoplDataset *dataset,
                         const char *method,
                         const char *run_config_json,
                         uint64_t seed,
                         CoplModel **out);

// Writes the learned parameters as a COPL1 checkpoint.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
int32_t copl_model_save_checkpoint(const CoplModel *model, const char *path);

// Predicts a class id for a row-major `rows × cols` patch matrix within
// the label space `split` (one of the `COPL_SPLIT_*` constants).
//
// # Safety
// `model` must be a live handle; `patches` must point to `rows * cols`
// readable doubles; `class_id` valid for writes.
int32_t copl_model_classify(const CoplModel *model,
                            const double *patches,
                            size_t rows,
                            size_t cols,
                            int32_t split,
                            size_t *class_id);

// # Safety
// `model` must be NULL or a handle not yet freed.
void copl_model_free(CoplModel *model);

// Runs one evaluation protocol for one seed and writes up to `capacity`
// rows. The ablation protocol produces two rows (copl, copl_global) and
// ignores `method`; `target` is required for `cross_dataset` only.
//
// # Safety
// Handles must be live (or NULL where allowed); strings NUL-terminated or
// NULL where allowed; `rows` must have room for `capacity` entries.
int32_t copl_eval_run(const CoplDataset *dataset,
                      const CoplDataset *target,
                      const char *protocol,
                      const char *method,
                      const char *run_config_json,
                      uint64_t seed,
                      CoplMetricRow *rows,
                      size_t capacity,
                      size_t *written);

// Runs the gradient-check suite on `instances` seeds per method. `passed`
// is set to whether every check is within tolerance; `max_rel_error` may
// be NULL.
//
// # Safety
// `passed` must be valid for writes; `max_rel_error` NULL or valid.
int32_t copl_gradcheck(size_t instances, bool *passed, double *max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COPL_H */
