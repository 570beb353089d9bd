#ifndef FGNMT_H
#define FGNMT_H

/* This file is generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FgnmtStatus {
  FGNMT_STATUS_OK = 0,
  /**
   * A null pointer, bad UTF-8, or an out-of-range argument.
   */
  FGNMT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Corpus or file contents violated a contract.
   */
  FGNMT_STATUS_DATA_ERROR = 2,
  /**
   * Non-finite numbers or other numeric breakdown.
   */
  FGNMT_STATUS_NUMERIC_ERROR = 3,
  FGNMT_STATUS_IO_ERROR = 4,
  /**
   * Malformed checkpoint, vocabulary, or alignment file.
   */
  FGNMT_STATUS_FORMAT_ERROR = 5,
} FgnmtStatus;

/**
 * A loaded model plus its vocabularies. Opaque to C callers.
 */
typedef struct FgnmtModel FgnmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The library version as a static string; never freed.
 */
const char *fgnmt_version(void);

/**
 * The current thread's most recent error message. The pointer stays valid
 * until the next failing call on this thread; never freed by the caller.
 */
const char *fgnmt_last_error(void);

/**
 * Loads a checkpoint and its vocabularies. Passing null vocabulary paths
 * uses the `<checkpoint>.src.vocab` / `<checkpoint>.tgt.vocab` convention.
 * On success `*out` owns the handle; release it with `fgnmt_model_free`.
 *
 * # Safety
 * All pointer arguments must be null or valid NUL-terminated strings, and
 * `out` must point to writable memory.
 */
enum FgnmtStatus fgnmt_model_load(const char *checkpoint,
                                  const char *src_vocab,
                                  const char *tgt_vocab,
                                  struct FgnmtModel **out);

/**
 * Releases a handle returned by `fgnmt_model_load`. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer previously returned by
 * `fgnmt_model_load` that has not been freed yet.
 */
void fgnmt_model_free(struct FgnmtModel *model);

/**
 * Translates one whitespace-tokenized line. `max_len` of 0 means the
 * default bound of 3·source length + 10. On success `*out` owns a C
 * string; release it with `fgnmt_string_free`.
 *
 * # Safety
 * `model` must be a live handle, `line` a valid NUL-terminated string,
 * and `out` writable.
 */
enum FgnmtStatus fgnmt_translate(const struct FgnmtModel *model,
                                 const char *line,
                                 uint32_t beam,
                                 uint32_t max_len,
                                 char **out);

/**
 * Like `fgnmt_translate`, and additionally writes the sentence's alignment
 * tensor to `fgat_path` (plus the flat-text token sidecar next to it).
 *
 * # Safety
 * As `fgnmt_translate`; `fgat_path` must be a valid NUL-terminated string.
 */
enum FgnmtStatus fgnmt_translate_with_alignment(const struct FgnmtModel *model,
                                                const char *line,
                                                uint32_t beam,
                                                uint32_t max_len,
                                                const char *fgat_path,
                                                char **out);

/**
 * Corpus BLEU between two files of equal line counts, already un-BPE'd
 * and tokenized. Writes the score in `[0, 100]` to `*out`.
 *
 * # Safety
 * The path arguments must be valid NUL-terminated strings and `out` must
 * point to writable memory.
 */
enum FgnmtStatus fgnmt_bleu(const char *hyp_path,
                            const char *ref_path,
                            bool smoothing,
                            double *out);

/**
 * Releases a string returned by the translate calls. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library that has not
 * been freed yet.
 */
void fgnmt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FGNMT_H */
