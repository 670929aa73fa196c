/* C ABI for the xmodal two-pass recognition and correction lab.
 *
 * All functions return XmStatus; on any non-OK status a human-readable
 * message is available from xm_last_error_message() until the next call
 * on the same thread. Handles are opaque, owned by the library, and must
 * be released with their matching _free function. A handle must only be
 * used from one thread at a time. */

#ifndef XMODAL_H
#define XMODAL_H

/* Generated by cbindgen from crates/ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every C-ABI call.
 */
typedef enum XmStatus {
  /**
   * Success.
   */
  XM_STATUS_OK = 0,
  /**
   * Invalid configuration or arguments.
   */
  XM_STATUS_VALIDATION = 1,
  /**
   * Runtime failure (I/O, numerics, corrupt files).
   */
  XM_STATUS_RUNTIME = 2,
  /**
   * A required pointer argument was null.
   */
  XM_STATUS_NULL_ARGUMENT = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  XM_STATUS_INVALID_UTF8 = 4,
  /**
   * An output buffer was too small; required size is in the out-length.
   */
  XM_STATUS_BUFFER_TOO_SMALL = 5,
} XmStatus;

/**
 * Opaque trained-network handle.
 */
typedef struct XmModel XmModel;

/**
 * Edit-distance decomposition against a reference sequence.
 */
typedef struct XmEditCounts {
  size_t substitutions;
  size_t insertions;
  size_t deletions;
  size_t ref_len;
} XmEditCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next library call on the same thread.
 */
const char *xm_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *xm_version(void);

/**
 * Load a checkpoint file into a model handle.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum XmStatus xm_model_load(const char *path, struct XmModel **out);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`xm_model_load`] and not be used afterwards.
 */
void xm_model_free(struct XmModel *model);

/**
 * Architecture label of the model: "asr", "cross_modal", or "separate".
 *
 * # Safety
 * `model` must be a live handle.
 */
const char *xm_model_arch(const struct XmModel *model);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t xm_model_param_count(const struct XmModel *model);

/**
 * Vocabulary size (reserved ids included).
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t xm_model_vocab_size(const struct XmModel *model);

/**
 * Beam-decode one utterance with a recognizer model. Writes the 1-best
 * token ids (eos excluded) and the total emitted count; if the buffer is
 * too small, returns BufferTooSmall with the required size in `out_len`.
 * `score` may be null.
 *
 * # Safety
 * Pointers must be valid for the documented lengths.
 */
enum XmStatus xm_decode(const struct XmModel *model,
                        const double *frames,
                        size_t n_frames,
                        size_t feature_dim,
                        size_t beam_size,
                        uint32_t *out_tokens,
                        size_t out_cap,
                        size_t *out_len,
                        double *score);

/**
 * Two-pass decoding: recognizer beam search produces the hypothesis, then
 * the corrector re-decodes fused with the recognizer at weight `alpha`.
 * Writes the final tokens; `score` may be null.
 *
 * # Safety
 * Pointers must be valid for the documented lengths.
 */
enum XmStatus xm_two_pass_decode(const struct XmModel *asr,
                                 const struct XmModel *corrector,
                                 const double *frames,
                                 size_t n_frames,
                                 size_t feature_dim,
                                 double alpha,
                                 size_t beam_size,
                                 uint32_t *out_tokens,
                                 size_t out_cap,
                                 size_t *out_len,
                                 double *score);

/**
 * Render token ids as UTF-8 text into `buf` (nul-terminated). If the
 * buffer is too small, returns BufferTooSmall with the required size
 * (including the nul) in `out_len`.
 *
 * # Safety
 * Pointers must be valid for the documented lengths.
 */
enum XmStatus xm_model_render(const struct XmModel *model,
                              const uint32_t *tokens,
                              size_t n_tokens,
                              char *buf,
                              size_t buf_cap,
                              size_t *out_len);

/**
 * Levenshtein alignment of hypothesis against reference with the library's
 * fixed substitution/insertion/deletion decomposition.
 *
 * # Safety
 * Sequences must be valid for their lengths; `out` must be writable.
 */
enum XmStatus xm_edit_counts(const uint32_t *reference,
                             size_t ref_len,
                             const uint32_t *hypothesis,
                             size_t hyp_len,
                             struct XmEditCounts *out);

/**
 * Generate the synthetic train/dev/eval corpora under `out_dir`.
 * `spec_json` holds a task-spec JSON document; pass null or "" for the
 * defaults. Files are identical to the CLI's `gen-data` output.
 *
 * # Safety
 * Strings must be nul-terminated; `out_dir` must be writable.
 */
enum XmStatus xm_generate_corpus(const char *spec_json, uint64_t seed, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XMODAL_H */
