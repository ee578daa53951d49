#ifndef MUSICDIFF_H
#define MUSICDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MdStatus {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_POINTER = 1,
  MD_STATUS_INVALID_ARGUMENT = 2,
  MD_STATUS_MALFORMED_MIDI = 3,
  MD_STATUS_MISSING_INPUT = 4,
  MD_STATUS_CONFIG_INVALID = 5,
  MD_STATUS_CHECKSUM_MISMATCH = 6,
  MD_STATUS_INVALID_CHECKPOINT = 7,
  MD_STATUS_MODEL_MISSING = 8,
  MD_STATUS_PROMPT_INVALID = 9,
  MD_STATUS_EMPTY_SCORE = 10,
  MD_STATUS_PANIC = 11,
  MD_STATUS_OTHER = 12,
} MdStatus;

/**
 * Trained models loaded from a checkpoint.
 */
typedef struct MdModel MdModel;

/**
 * A quantized score.
 */
typedef struct MdScore MdScore;

/**
 * The metric report columns for one piece. `ppl` is NaN when no pitch
 * model was involved.
 */
typedef struct MdMetrics {
  double ppl;
  double pcu;
  double tup;
  double pr;
  double aps;
  double isr;
  double prs;
  double ioi;
  double gs;
  double pch;
  double cpi;
  double si;
} MdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *md_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *md_version(void);

/**
 * Parse a standard MIDI file and quantize it to the semiquaver grid.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` must be writable.
 */
enum MdStatus md_score_from_midi(const uint8_t *bytes, size_t len, struct MdScore **out);

/**
 * Serialize a score as a standard MIDI file. The buffer is released with
 * [`md_bytes_free`].
 *
 * # Safety
 * `score` must be a live handle; `out` and `out_len` must be writable.
 */
enum MdStatus md_score_to_midi(const struct MdScore *score, uint8_t **out, size_t *out_len);

/**
 * Number of notes, or 0 for a null handle.
 *
 * # Safety
 * `score` must be null or a live handle.
 */
size_t md_score_num_notes(const struct MdScore *score);

/**
 * Number of bars, or 0 for a null handle.
 *
 * # Safety
 * `score` must be null or a live handle.
 */
size_t md_score_num_bars(const struct MdScore *score);

/**
 * # Safety
 * `score` must be null or a handle not yet freed.
 */
void md_score_free(struct MdScore *score);

/**
 * # Safety
 * `ptr` and `len` must come from one library call that returned a buffer.
 */
void md_bytes_free(uint8_t *ptr, size_t len);

/**
 * All report columns for one score, with chords recognized from its bars.
 *
 * # Safety
 * `score` must be a live handle and `out` writable.
 */
enum MdStatus md_score_metrics(const struct MdScore *score, struct MdMetrics *out);

/**
 * Structural-similarity loss between two equal-length sequences.
 *
 * # Safety
 * `a` and `b` must each point to `len` doubles; `out` must be writable.
 */
enum MdStatus md_ssim_loss(const double *a, const double *b, size_t len, double *out);

/**
 * Linear-time WKV attention over `len` steps of `channels` channels.
 * `keys`, `values` and `out` are row-major `len × channels`; `decay` holds
 * one (non-positive) log-decay per channel.
 *
 * # Safety
 * All pointers must cover the sizes above.
 */
enum MdStatus md_wkv(const double *decay,
                     const double *keys,
                     const double *values,
                     size_t len,
                     size_t channels,
                     double *out);

/**
 * Load trained models from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MdStatus md_model_load(const char *path, struct MdModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void md_model_free(struct MdModel *model);

/**
 * Sample a score for a JSON prompt (`{"chords": [...], "sections": [...]}`).
 *
 * # Safety
 * `model` must be a live handle, `prompt_json` a NUL-terminated string and
 * `out` writable.
 */
enum MdStatus md_generate(const struct MdModel *model,
                          const char *prompt_json,
                          uint64_t seed,
                          struct MdScore **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUSICDIFF_H */
