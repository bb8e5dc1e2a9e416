/* C interface for the batchgemba library. */

#ifndef BATCHGEMBA_H
#define BATCHGEMBA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum BgStatus {
  /**
   * The call succeeded and outputs are valid.
   */
  BG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BG_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  BG_STATUS_INVALID_UTF8 = 2,
  /**
   * Arguments were readable but semantically invalid; see bg_last_error.
   */
  BG_STATUS_BAD_INPUT = 3,
  /**
   * The library failed internally; see bg_last_error.
   */
  BG_STATUS_INTERNAL = 4,
} BgStatus;

/**
 * Opaque prompt template handle; create with bg_template_default or
 * bg_template_from_json and release with bg_template_free.
 */
typedef struct BgTemplate BgTemplate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed by the caller.
 */
const char *bg_version(void);

/**
 * Message for the most recent failure on the calling thread. The pointer
 * stays valid until the next failing call on the same thread; do not free.
 */
const char *bg_last_error(void);

/**
 * Releases a string returned through a `char**` output.
 *
 * # Safety
 * `text` must be null or a pointer previously returned by this library and
 * not yet freed.
 */
void bg_string_free(char *text);

/**
 * Counts tokens in `text` with the deterministic rule tokenizer: runs of
 * alphanumeric characters are one token, CJK-like characters one token
 * each, other non-space characters one token apiece.
 *
 * # Safety
 * `text` must be null or NUL-terminated; `out` must be null or writable.
 */
enum BgStatus bg_token_count(const char *text, uintptr_t *out);

/**
 * Pearson correlation of two equal-length samples of at least two points.
 *
 * # Safety
 * `xs` and `ys` must be null or point to `len` readable doubles; `out`
 * must be null or writable.
 */
enum BgStatus bg_pearson(const double *xs, const double *ys, uintptr_t len, double *out);

/**
 * Scores a JSON array of MQM errors (`[{"severity": "minor|major|critical",
 * "category": "...", "span": "..."}]`) with the default severity weights:
 * the negated, capped weight sum, and 0 for an empty array.
 *
 * # Safety
 * `errors_json` must be null or NUL-terminated; `out` must be null or
 * writable.
 */
enum BgStatus bg_score_errors(const char *errors_json, double *out);

/**
 * Parses a model response for a batch of `batch_size` examples. The result
 * is a JSON object `{"outcomes": [...], "diagnostics": [...]}` with exactly
 * `batch_size` outcomes, each either parsed errors or a malform reason.
 *
 * # Safety
 * `text` must be null or NUL-terminated; `out_json` must be null or
 * writable. On success `*out_json` must be freed with bg_string_free.
 */
enum BgStatus bg_parse_batch_response(const char *text, uintptr_t batch_size, char **out_json);

/**
 * Compresses one example (`{"id", "src_lang", "tgt_lang", "source",
 * "target", "human_score"?, "spans"?}`) by randomly removing about `ratio`
 * of each side's tokens, never touching tokens inside annotated spans.
 * Deterministic per seed. Returns `{"source", "target", "achieved_ratio"}`.
 *
 * # Safety
 * `example_json` must be null or NUL-terminated; `out_json` must be null or
 * writable. On success `*out_json` must be freed with bg_string_free.
 */
enum BgStatus bg_compress_example(const char *example_json,
                                  double ratio,
                                  uint64_t seed,
                                  char **out_json);

/**
 * Creates a template handle for the shipped default prompt template.
 *
 * # Safety
 * `out` must be null or writable. On success the handle must be released
 * with bg_template_free.
 */
enum BgStatus bg_template_default(struct BgTemplate **out);

/**
 * Creates a template handle from template JSON (same shape as the shipped
 * template file: instruction, fewshot examples, a per-example frame with
 * the five placeholders, and output instructions).
 *
 * # Safety
 * `json` must be null or NUL-terminated; `out` must be null or writable.
 * On success the handle must be released with bg_template_free.
 */
enum BgStatus bg_template_from_json(const char *json, struct BgTemplate **out);

/**
 * Releases a template handle.
 *
 * # Safety
 * `template` must be null or a handle from this library not yet freed.
 */
void bg_template_free(struct BgTemplate *template_);

/**
 * Renders the batched evaluation prompt for `{"batch_id", "examples"}`.
 * All examples must share one language pair; batch size is capped. Returns
 * `{"messages": [{"role", "content"}, ...], "token_count", "batch_size"}`
 * with the four-message layout: instruction, demonstration batch,
 * demonstration answer, and the target batch.
 *
 * # Safety
 * `template` must be a live handle from this library; `batch_json` must be
 * null or NUL-terminated; `out_json` must be null or writable. On success
 * `*out_json` must be freed with bg_string_free.
 */
enum BgStatus bg_render_prompt(const struct BgTemplate *template_,
                               const char *batch_json,
                               char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BATCHGEMBA_H */
