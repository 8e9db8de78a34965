/* mrplab C ABI: checkpoint/corpus loading and accuracy scoring. */

#ifndef MRPLAB_H
#define MRPLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum MrplabStatus {
  MrplabStatus_Ok = 0,
  MrplabStatus_NullArgument = 1,
  MrplabStatus_InvalidUtf8 = 2,
  MrplabStatus_Io = 3,
  MrplabStatus_InvalidInput = 4,
  MrplabStatus_Runtime = 5,
} MrplabStatus;

/**
 * Opaque handle: a loaded topic corpus.
 */
typedef struct MrplabCorpus MrplabCorpus;

/**
 * Opaque handle: a loaded model checkpoint (base weights plus projection
 * hooks).
 */
typedef struct MrplabModel MrplabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message for this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length in
 * bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
size_t mrplab_last_error(char *buf, size_t len);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *mrplab_version(void);

/**
 * Loads a checkpoint file written by the `mrplab` pipeline.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MrplabStatus mrplab_model_load(const char *path, struct MrplabModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must have come from `mrplab_model_load` and not be freed twice.
 */
void mrplab_model_free(struct MrplabModel *model);

/**
 * Loads a corpus directory written by `mrplab gen`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MrplabStatus mrplab_corpus_load(const char *dir, struct MrplabCorpus **out);

/**
 * Releases a corpus handle. Null is ignored.
 *
 * # Safety
 * `corpus` must have come from `mrplab_corpus_load` and not be freed twice.
 */
void mrplab_corpus_free(struct MrplabCorpus *corpus);

/**
 * Number of base-model parameters.
 *
 * # Safety
 * `model` must be a live handle from `mrplab_model_load`.
 */
uint64_t mrplab_model_base_params(const struct MrplabModel *model);

/**
 * Number of projection parameters across hooked layers (Σ rank·d).
 *
 * # Safety
 * `model` must be a live handle from `mrplab_model_load`.
 */
uint64_t mrplab_model_projection_params(const struct MrplabModel *model);

/**
 * Multiple-choice accuracy of `model` on one topic split.
 *
 * # Safety
 * All pointers must be valid; strings NUL-terminated.
 */
enum MrplabStatus mrplab_qa_accuracy(const struct MrplabModel *model,
                                     const struct MrplabCorpus *corpus,
                                     const char *topic,
                                     const char *split,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRPLAB_H */
