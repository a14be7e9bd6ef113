#ifndef MMLAB_H
#define MMLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Which modality fills both slots in [`mmlab_dataset_generate`].
 */
#define MMLAB_DUPLICATE_NONE -1

#define MMLAB_DUPLICATE_M0 0

#define MMLAB_DUPLICATE_M1 1

/*
 Split selector for [`mmlab_dataset_len`].
 */
#define MMLAB_SPLIT_TRAIN 0

#define MMLAB_SPLIT_VAL 1

#define MMLAB_SPLIT_TEST 2

typedef enum MmlabStatus {
  MMLAB_STATUS_OK = 0,
  MMLAB_STATUS_NULL_ARGUMENT = 1,
  MMLAB_STATUS_INVALID_UTF8 = 2,
  MMLAB_STATUS_CONFIG = 3,
  MMLAB_STATUS_IO = 4,
  MMLAB_STATUS_FORMAT = 5,
  MMLAB_STATUS_NUMERIC = 6,
  MMLAB_STATUS_PANIC = 7,
} MmlabStatus;

typedef struct MmlabDataset MmlabDataset;

typedef struct MmlabRun MmlabRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. Valid until
 the next failing call on the same thread.
 */
const char *mmlab_last_error(void);

/*
 Library version as a static string.
 */
const char *mmlab_version(void);

/*
 # Safety
 `s` must be null or a string returned by this library.
 */
void mmlab_string_free(char *s);

/*
 Generate a dataset from a JSON generator spec (missing fields take
 their defaults; `"{}"` is valid).

 # Safety
 `spec_json` must be a NUL-terminated string; `out` must be writable.
 */
enum MmlabStatus mmlab_dataset_generate(const char *spec_json,
                                        int32_t duplicate,
                                        struct MmlabDataset **out);

/*
 # Safety
 `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum MmlabStatus mmlab_dataset_load(const char *dir, struct MmlabDataset **out);

/*
 # Safety
 `ds` must be a live dataset handle; `dir` a NUL-terminated path.
 */
enum MmlabStatus mmlab_dataset_save(const struct MmlabDataset *ds, const char *dir);

/*
 Number of samples in a split, or 0 for a null handle or unknown split.

 # Safety
 `ds` must be null or a live dataset handle.
 */
size_t mmlab_dataset_len(const struct MmlabDataset *ds, int32_t split);

/*
 Content identifier of the dataset; free with [`mmlab_string_free`].

 # Safety
 `ds` must be a live dataset handle; `out` must be writable.
 */
enum MmlabStatus mmlab_dataset_id(const struct MmlabDataset *ds, char **out);

/*
 # Safety
 `ds` must be null or a handle from this library not yet freed.
 */
void mmlab_dataset_free(struct MmlabDataset *ds);

/*
 Train one run to completion and diagnose its best checkpoint.
 `config_json` is a training config (missing fields take defaults).
 A diverged run still yields a handle; its record carries the failure.

 # Safety
 `ds` must be a live dataset handle; `config_json` NUL-terminated; `out`
 writable.
 */
enum MmlabStatus mmlab_train(const struct MmlabDataset *ds,
                             const char *config_json,
                             struct MmlabRun **out);

/*
 The run's record as JSON; free with [`mmlab_string_free`].

 # Safety
 `run` must be a live run handle; `out` must be writable.
 */
enum MmlabStatus mmlab_run_record_json(const struct MmlabRun *run, char **out);

/*
 Validation-selected test accuracy; NaN when the run produced none.

 # Safety
 `run` must be null or a live run handle.
 */
double mmlab_run_test_accuracy(const struct MmlabRun *run);

/*
 Diff_util of the best checkpoint; NaN when undefined.

 # Safety
 `run` must be null or a live run handle.
 */
double mmlab_run_diff_util(const struct MmlabRun *run);

/*
 # Safety
 `run` must be a live run handle; `dir` a NUL-terminated path.
 */
enum MmlabStatus mmlab_run_save_checkpoint(const struct MmlabRun *run, const char *dir);

/*
 # Safety
 `run` must be null or a handle from this library not yet freed.
 */
void mmlab_run_free(struct MmlabRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMLAB_H */
