/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef HYBRIDMT_H
#define HYBRIDMT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HmtLossKind {
  HMT_LOSS_KIND_CLM = 0,
  HMT_LOSS_KIND_HYBRID_NLL = 1,
  HMT_LOSS_KIND_HYBRID_MM = 2,
} HmtLossKind;

typedef enum HmtMaskPolicy {
  HMT_MASK_POLICY_ALL_TOKENS = 0,
  HMT_MASK_POLICY_PRONOUN_ONLY = 1,
} HmtMaskPolicy;

typedef enum HmtNegativePolicy {
  HMT_NEGATIVE_POLICY_MAX_ALL = 0,
  HMT_NEGATIVE_POLICY_MAX_EXCLUDING_REFERENCE = 1,
} HmtNegativePolicy;

/**
 * Result codes.
 */
typedef enum HmtStatus {
  HMT_STATUS_OK = 0,
  HMT_STATUS_NULL_POINTER = 1,
  HMT_STATUS_INVALID_ARGUMENT = 2,
  HMT_STATUS_DIMENSION = 3,
  HMT_STATUS_IO = 4,
  HMT_STATUS_CHECKPOINT = 5,
  HMT_STATUS_PARSE = 6,
  HMT_STATUS_NON_FINITE = 7,
  HMT_STATUS_BUFFER_TOO_SMALL = 8,
  HMT_STATUS_PANIC = 9,
} HmtStatus;

/**
 * Opaque model handle.
 */
typedef struct HmtModel HmtModel;

/**
 * Objective configuration. `mask_policy` is informational here: callers
 * pass the token mask explicitly.
 */
typedef struct HmtLossSpec {
  enum HmtLossKind kind;
  double lambda;
  double tau;
  double mu;
  enum HmtMaskPolicy mask_policy;
  enum HmtNegativePolicy negative_policy;
} HmtLossSpec;

/**
 * Decomposed batch objective.
 */
typedef struct HmtLossBreakdown {
  double total;
  double generative;
  double discriminative;
  size_t masked_token_count;
  size_t sentence_count;
} HmtLossBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *hmt_last_error(void);

/**
 * Default objective of the given kind (lambda 0.5, tau 0.5, mu 0.3,
 * all-tokens mask, max-over-all negative).
 */
struct HmtLossSpec hmt_loss_spec_default(enum HmtLossKind kind);

/**
 * Batch objective over per-sentence logits.
 *
 * `logits` holds the rows of all sentences back to back, row-major with
 * `vocab` columns; sentence `i` has `rows[i]` rows. `refs` has one id per
 * row and `mask` (nullable: all tokens) one byte per row. When `grad` is
 * not NULL it receives the gradient with the same layout as `logits`.
 *
 * # Safety
 * Every non-null pointer must reference at least the number of elements
 * implied by `rows`, `n_sentences` and `vocab`.
 */
enum HmtStatus hmt_loss(const struct HmtLossSpec *spec,
                        const double *logits,
                        const size_t *rows,
                        size_t n_sentences,
                        size_t vocab,
                        const size_t *refs,
                        const uint8_t *mask,
                        double label_smoothing,
                        struct HmtLossBreakdown *out,
                        double *grad);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HmtStatus hmt_model_load(const char *path, struct HmtModel **out);

/**
 * Releases a handle; NULL is ignored.
 *
 * # Safety
 * `model` must come from [`hmt_model_load`] and not be used afterwards.
 */
void hmt_model_free(struct HmtModel *model);

/**
 * Vocabulary size of the model, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t hmt_model_vocab_size(const struct HmtModel *model);

/**
 * Greedy translation of one encoded source sentence. Writes at most
 * `out_cap` ids to `out` and the output length to `*out_len`; EOS is not
 * included. Returns `BufferTooSmall` (with `*out_len` set) when the output
 * does not fit.
 *
 * # Safety
 * `src` must hold `src_len` ids, `out` `out_cap` slots, `out_len` one.
 */
enum HmtStatus hmt_model_translate(const struct HmtModel *model,
                                   const size_t *src,
                                   size_t src_len,
                                   size_t max_len,
                                   size_t *out,
                                   size_t out_cap,
                                   size_t *out_len);

/**
 * Teacher-forced logits for one sentence pair: `tgt_len` rows of
 * `vocab_size` values written row-major to `out` (`out_cap` values).
 *
 * # Safety
 * Pointers must reference the stated number of elements.
 */
enum HmtStatus hmt_model_logits(const struct HmtModel *model,
                                const size_t *src,
                                size_t src_len,
                                const size_t *tgt,
                                size_t tgt_len,
                                double *out,
                                size_t out_cap);

/**
 * Corpus BLEU (0-100, 4-gram, no smoothing) of newline-separated,
 * whitespace-tokenized hypotheses against references.
 *
 * # Safety
 * Both strings must be NUL-terminated; `score` must be valid.
 */
enum HmtStatus hmt_corpus_bleu(const char *hyps, const char *refs, double *score);

/**
 * Macro-averaged pronoun precision, recall and F1 (each in [0, 1]) over the
 * bundled pronoun inventory. Any of the output pointers may be NULL.
 *
 * # Safety
 * Both strings must be NUL-terminated; non-null outputs must be valid.
 */
enum HmtStatus hmt_pronoun_prf(const char *hyps,
                               const char *refs,
                               double *precision,
                               double *recall,
                               double *f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRIDMT_H */
