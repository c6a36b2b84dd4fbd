#ifndef SYNTAXSHAP_H
#define SYNTAXSHAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

#define SS_METHOD_SYNTAXSHAP 0

#define SS_METHOD_SYNTAXSHAP_W 1

#define SS_METHOD_EXACT_SHAPLEY 2

#define SS_METHOD_RANDOM 3

#define SS_STRATEGY_ZERO_ATTENTION 0

#define SS_STRATEGY_RANDOM_REPLACE 1

/*
 Status codes returned by every fallible function.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_PARSE = 3,
  SS_STATUS_ORACLE = 4,
  SS_STATUS_TOO_LARGE = 5,
  SS_STATUS_BUFFER_TOO_SMALL = 6,
  SS_STATUS_PANIC = 7,
} SsStatus;

/*
 A model answering value queries.
 */
typedef struct SsOracle SsOracle;

/*
 One attribution result.
 */
typedef struct SsResult SsResult;

/*
 A token-level dependency tree.
 */
typedef struct SsTree SsTree;

/*
 Fills `dist[0..vocab_size]` with the next-token distribution for `tokens`
 where only positions with `keep[i]` set are visible. Returns 0 on success.
 */
typedef int32_t (*SsDistributionFn)(void *user_data,
                                    const uint32_t *tokens,
                                    const bool *keep,
                                    uintptr_t n,
                                    uint32_t strategy,
                                    uint64_t seed,
                                    double *dist,
                                    uint32_t vocab_size);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message into `buf` (NUL terminated,
 truncated to `cap`). Returns the full message length plus one, or 0 when
 there is no error.

 # Safety
 `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
 */
uintptr_t ss_last_error(char *buf, uintptr_t cap);

/*
 Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/*
 Builds a tree with one token per word. `heads[i]` is the 1-based head of
 word `i + 1` (0 for the root); `token_ids[i]` its model token id.

 # Safety
 `heads` and `token_ids` must point to `n` readable elements; `out` must be writable.
 */
enum SsStatus ss_tree_from_heads(const uintptr_t *heads,
                                 const uint32_t *token_ids,
                                 uintptr_t n,
                                 struct SsTree **out);

/*
 Parses sentence `index` (0-based) of a CoNLL-U document. Token ids come from
 the `TokIds` MISC key when present, else from hashing word forms into
 `vocab_size` entries.

 # Safety
 `conllu` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_tree_from_conllu(const char *conllu,
                                  uintptr_t index,
                                  uint32_t vocab_size,
                                  struct SsTree **out);

/*
 Number of token features, 0 for a null tree.

 # Safety
 `tree` must be null or a live handle.
 */
uintptr_t ss_tree_len(const struct SsTree *tree);

/*
 Copies the 1-based level of every token into `levels[0..cap]`.

 # Safety
 `tree` must be a live handle and `levels` must point to `cap` writable elements.
 */
enum SsStatus ss_tree_levels(const struct SsTree *tree, uintptr_t *levels, uintptr_t cap);

/*
 # Safety
 `tree` must be null or a handle not yet freed.
 */
void ss_tree_free(struct SsTree *tree);

/*
 Number of allowed coalitions a feature at `level` joins.

 # Safety
 `tree` must be a live handle; `out` must be writable.
 */
enum SsStatus ss_count_updates(const struct SsTree *tree, uintptr_t level, uint64_t *out);

/*
 Total (coalition, feature) pairs a full run evaluates, and the pair count of
 exact Shapley values (saturating at `UINT64_MAX`).

 # Safety
 `tree` must be a live handle; `pairs` and `naive` must be writable.
 */
enum SsStatus ss_predicted_evaluations(const struct SsTree *tree, uint64_t *pairs, uint64_t *naive);

/*
 Deterministic toy language model.

 # Safety
 `out` must be writable.
 */
enum SsStatus ss_oracle_toy(uint64_t seed, uint32_t vocab_size, struct SsOracle **out);

/*
 Client for an HTTP scoring server; performs the metadata handshake.

 # Safety
 `url` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_oracle_remote(const char *url,
                               uint64_t timeout_ms,
                               uint32_t retries,
                               struct SsOracle **out);

/*
 Wraps a C function returning next-token distributions. The callback may be
 invoked concurrently from several threads and must be deterministic.

 # Safety
 `callback` must stay valid, and `user_data` usable from any thread, until
 the oracle is freed. `out` must be writable.
 */
enum SsStatus ss_oracle_callback(SsDistributionFn callback,
                                 void *user_data,
                                 uint32_t vocab_size,
                                 struct SsOracle **out);

/*
 # Safety
 `oracle` must be null or a handle not yet freed.
 */
void ss_oracle_free(struct SsOracle *oracle);

/*
 Explains the model's prediction for `tree`. With `has_target` false the
 model's top-1 next token on the full sentence is explained.

 # Safety
 `tree` and `oracle` must be live handles; `out` must be writable.
 */
enum SsStatus ss_explain(const struct SsTree *tree,
                         const struct SsOracle *oracle,
                         uint32_t method,
                         uint32_t strategy,
                         uint64_t seed,
                         bool has_target,
                         uint32_t target,
                         struct SsResult **out);

/*
 Number of values in a result, 0 for null.

 # Safety
 `result` must be null or a live handle.
 */
uintptr_t ss_result_len(const struct SsResult *result);

/*
 # Safety
 `result` must be a live handle and `values` must point to `cap` writable elements.
 */
enum SsStatus ss_result_values(const struct SsResult *result, double *values, uintptr_t cap);

/*
 1-based ranks, 1 for the most important token.

 # Safety
 `result` must be a live handle and `ranks` must point to `cap` writable elements.
 */
enum SsStatus ss_result_ranks(const struct SsResult *result, uintptr_t *ranks, uintptr_t cap);

/*
 The explained next token.

 # Safety
 `result` must be a live handle; `target` must be writable.
 */
enum SsStatus ss_result_target(const struct SsResult *result, uint32_t *target);

/*
 Marginal terms evaluated and distinct oracle queries made.

 # Safety
 `result` must be a live handle; `pairs` and `unique` must be writable.
 */
enum SsStatus ss_result_oracle_calls(const struct SsResult *result,
                                     uint64_t *pairs,
                                     uint64_t *unique);

/*
 # Safety
 `result` must be null or a handle not yet freed.
 */
void ss_result_free(struct SsResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNTAXSHAP_H */
