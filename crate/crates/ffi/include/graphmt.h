#ifndef GRAPHMT_H
#define GRAPHMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped whenever a signature or struct layout changes.
 */
#define GRAPHMT_ABI_VERSION 1

typedef enum GraphmtStatus {
  GRAPHMT_STATUS_OK = 0,
  GRAPHMT_STATUS_NULL_ARGUMENT = 1,
  GRAPHMT_STATUS_INVALID_ARGUMENT = 2,
  GRAPHMT_STATUS_IO = 3,
  GRAPHMT_STATUS_DATA = 4,
  GRAPHMT_STATUS_CONFIG = 5,
  GRAPHMT_STATUS_CHECKPOINT = 6,
  GRAPHMT_STATUS_CHECKPOINT_MISMATCH = 7,
  GRAPHMT_STATUS_NUMERIC = 8,
  GRAPHMT_STATUS_PANIC = 9,
} GraphmtStatus;

/**
 * A multi-modal graph built against a model's source vocabulary.
 */
typedef struct GraphmtGraph GraphmtGraph;

/**
 * A trained model with its vocabularies.
 */
typedef struct GraphmtModel GraphmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI version of this library.
 */
uint32_t graphmt_abi_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next graphmt call on the same thread.
 */
const char *graphmt_last_error(void);

/**
 * Loads a checkpoint and its source/target vocabulary files.
 *
 * # Safety
 * Path arguments must be valid NUL-terminated strings; `out` must be a
 * valid pointer.
 */
enum GraphmtStatus graphmt_model_load(const char *checkpoint_path,
                                      const char *src_vocab_path,
                                      const char *tgt_vocab_path,
                                      struct GraphmtModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`graphmt_model_load`] not yet freed.
 */
void graphmt_model_free(struct GraphmtModel *model);

/**
 * Number of trainable scalars in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GraphmtStatus graphmt_model_num_params(const struct GraphmtModel *model, uint64_t *out);

/**
 * Builds a graph from one dataset line in the JSONL format. Sidecar feature
 * references resolve relative to the current directory.
 *
 * # Safety
 * `model` must be a live handle, `json_line` a valid string and `out` a
 * valid pointer.
 */
enum GraphmtStatus graphmt_graph_from_json(const struct GraphmtModel *model,
                                           const char *json_line,
                                           bool fully_connected,
                                           struct GraphmtGraph **out);

/**
 * Releases a graph. Null is ignored.
 *
 * # Safety
 * `graph` must be null or a live handle.
 */
void graphmt_graph_free(struct GraphmtGraph *graph);

/**
 * Node and inter-modal edge counts.
 *
 * # Safety
 * `graph` must be a live handle; each out pointer may be null.
 */
enum GraphmtStatus graphmt_graph_counts(const struct GraphmtGraph *graph,
                                        size_t *textual,
                                        size_t *visual,
                                        size_t *edges);

/**
 * The `index`-th inter-modal edge as (textual, visual) node indices.
 *
 * # Safety
 * `graph` must be a live handle; `textual` and `visual` valid pointers.
 */
enum GraphmtStatus graphmt_graph_edge(const struct GraphmtGraph *graph,
                                      size_t index,
                                      size_t *textual,
                                      size_t *visual);

/**
 * Translates a graph. `beam_size` 0 or 1 means greedy; `max_len` 0 uses the
 * default limit. The space-joined output is written to `out`.
 *
 * # Safety
 * Handles must be live; `out` a valid pointer.
 */
enum GraphmtStatus graphmt_translate(const struct GraphmtModel *model,
                                     const struct GraphmtGraph *graph,
                                     size_t beam_size,
                                     size_t max_len,
                                     char **out);

/**
 * Corpus BLEU (percentage) of two line-aligned text files.
 *
 * # Safety
 * Paths must be valid strings and `out` a valid pointer.
 */
enum GraphmtStatus graphmt_bleu_files(const char *hypotheses_path,
                                      const char *references_path,
                                      double *out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned through an out-parameter of this
 * library, not yet freed.
 */
void graphmt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAPHMT_H */
