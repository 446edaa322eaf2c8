#ifndef GCFUSE_H
#define GCFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum GcfStatus {
  GcfOk = 0,
  GcfErrShape = 1,
  GcfErrContract = 2,
  GcfErrNumeric = 3,
  GcfErrParse = 4,
  GcfErrIntegrity = 5,
  GcfErrConfig = 6,
  GcfErrIo = 7,
  GcfErrNullPointer = 8,
  GcfErrInvalidUtf8 = 9,
  GcfErrPanic = 10,
} GcfStatus;

/**
 * Opaque handle to a loaded or generated document graph.
 */
typedef struct GcfCorpus GcfCorpus;

/**
 * Opaque handle to one trained model together with its run metrics.
 */
typedef struct GcfModel GcfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the most recent error on this thread into `buf`
 * (NUL-terminated, truncated to `len` bytes). Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
uintptr_t gcf_last_error_message(char *buf, uintptr_t len);

/**
 * Loads a corpus from a tab-separated file. On success writes a handle the
 * caller must release with `gcf_corpus_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum GcfStatus gcf_corpus_load(const char *path, struct GcfCorpus **out);

/**
 * Generates a synthetic citation corpus. Zero/negative signal arguments are
 * valid; values outside [0, 1] are rejected.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GcfStatus gcf_corpus_generate(uintptr_t n,
                                   uintptr_t num_classes,
                                   double homophily,
                                   double text_signal,
                                   double graph_signal,
                                   uint64_t seed,
                                   struct GcfCorpus **out);

/**
 * Number of documents in the corpus. Null handle yields 0.
 *
 * # Safety
 * `corpus` must be a live handle from this library, or null.
 */
uintptr_t gcf_corpus_len(const struct GcfCorpus *corpus);

/**
 * Number of distinct labels in the corpus. Null handle yields 0.
 *
 * # Safety
 * `corpus` must be a live handle from this library, or null.
 */
uintptr_t gcf_corpus_num_classes(const struct GcfCorpus *corpus);

/**
 * Number of citation edges. Null handle yields 0.
 *
 * # Safety
 * `corpus` must be a live handle from this library, or null.
 */
uintptr_t gcf_corpus_num_edges(const struct GcfCorpus *corpus);

/**
 * Releases a corpus handle. Null is a no-op.
 *
 * # Safety
 * `corpus` must be a handle from this library not yet freed, or null.
 */
void gcf_corpus_free(struct GcfCorpus *corpus);

/**
 * Trains one architecture variant on the corpus with the given seed and
 * epoch budget. `max_epochs` of 0 means the library default. On success
 * writes a model handle the caller must release with `gcf_model_free`.
 *
 * # Safety
 * `corpus` must be a live handle; `variant` a NUL-terminated string; `out`
 * a valid pointer.
 */
enum GcfStatus gcf_train(const struct GcfCorpus *corpus,
                         const char *variant,
                         uint64_t seed,
                         uintptr_t max_epochs,
                         struct GcfModel **out);

/**
 * Test-set balanced error of the trained model, in percent.
 *
 * # Safety
 * `model` must be a live handle from this library, or null (yields NaN).
 */
double gcf_model_balanced_error(const struct GcfModel *model);

/**
 * Test-set macro-averaged F1 of the trained model, in percent.
 *
 * # Safety
 * `model` must be a live handle from this library, or null (yields NaN).
 */
double gcf_model_macro_f1(const struct GcfModel *model);

/**
 * Epoch whose validation error selected the reported model state.
 *
 * # Safety
 * `model` must be a live handle from this library, or null (yields 0).
 */
uintptr_t gcf_model_best_epoch(const struct GcfModel *model);

/**
 * Predicted class for document `doc` of the training corpus, computed on
 * the held-out test pass. Documents outside the test split yield a
 * contract error.
 *
 * # Safety
 * `model` must be a live handle; `out` a valid pointer.
 */
enum GcfStatus gcf_model_test_prediction(const struct GcfModel *model,
                                         uintptr_t doc,
                                         uintptr_t *out);

/**
 * Writes the document id of the `i`-th test-split entry (0-based) into
 * `out`, for enumerating the test set before calling
 * `gcf_model_test_prediction`. Out-of-range `i` is a contract error.
 *
 * # Safety
 * `model` must be a live handle; `out` a valid pointer.
 */
enum GcfStatus gcf_model_test_doc(const struct GcfModel *model, uintptr_t i, uintptr_t *out);

/**
 * Number of test-split documents scored by this model.
 *
 * # Safety
 * `model` must be a live handle from this library, or null (yields 0).
 */
uintptr_t gcf_model_test_len(const struct GcfModel *model);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle from this library not yet freed, or null.
 */
void gcf_model_free(struct GcfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCFUSE_H */
