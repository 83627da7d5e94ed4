#ifndef PROAGYM_H
#define PROAGYM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum ProagymStatus {
  PROAGYM_STATUS_OK = 0,
  PROAGYM_STATUS_NULL_ARGUMENT = 1,
  PROAGYM_STATUS_INVALID_UTF8 = 2,
  PROAGYM_STATUS_INVALID_INPUT = 3,
  PROAGYM_STATUS_CONTRACT = 4,
  PROAGYM_STATUS_IO = 5,
  PROAGYM_STATUS_NOT_FOUND = 6,
  PROAGYM_STATUS_CONFLICT = 7,
  PROAGYM_STATUS_BUFFER_TOO_SMALL = 8,
  PROAGYM_STATUS_PANIC = 9,
} ProagymStatus;

/**
 * Judge decision passed to [`proagym_classify`].
 */
typedef enum ProagymDecision {
  PROAGYM_DECISION_NONE = 0,
  PROAGYM_DECISION_ACCEPTED = 1,
  PROAGYM_DECISION_REJECTED = 2,
} ProagymDecision;

typedef enum ProagymCell {
  PROAGYM_CELL_TP = 0,
  PROAGYM_CELL_FP = 1,
  PROAGYM_CELL_TN = 2,
  PROAGYM_CELL_FN = 3,
} ProagymCell;

typedef enum ProagymCategory {
  PROAGYM_CATEGORY_MN = 0,
  PROAGYM_CATEGORY_NR = 1,
  PROAGYM_CATEGORY_CD = 2,
  PROAGYM_CATEGORY_FD = 3,
  PROAGYM_CATEGORY_WD = 4,
} ProagymCategory;

/**
 * Opaque handle to an annotation store.
 */
typedef struct ProagymStore ProagymStore;

typedef struct ProagymCounts {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} ProagymCounts;

/**
 * Ratios in [0, 1]. A `has_*` flag of false means the ratio is undefined
 * (zero denominator) and the value field is 0.
 */
typedef struct ProagymMetrics {
  double recall;
  double precision;
  double accuracy;
  double false_alarm;
  double f1;
  bool has_recall;
  bool has_precision;
  bool has_accuracy;
  bool has_false_alarm;
} ProagymMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *proagym_last_error(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library that has not
 * been freed yet.
 */
void proagym_string_free(char *s);

/**
 * Harmonic mean of recall and precision, 0 when both are 0.
 */
double proagym_f1(double recall, double precision);

/**
 * Compute the proactiveness metrics for a confusion matrix.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum ProagymStatus proagym_compute_metrics(struct ProagymCounts counts, struct ProagymMetrics *out);

/**
 * Classify one step. A prediction needs a decision and a silent step must
 * not have one; violating that returns `Contract`.
 *
 * # Safety
 * `out_cell` and `out_category` must be valid for writes.
 */
enum ProagymStatus proagym_classify(bool predicted,
                                    enum ProagymDecision decision,
                                    bool need,
                                    enum ProagymCell *out_cell,
                                    enum ProagymCategory *out_category);

/**
 * Pick the `min(k, n)` embeddings with the smallest total pairwise cosine
 * distance. `embeddings` is row-major, `n * dim` values. The chosen
 * indices are written ascending to `out_indices`, which must hold
 * `out_capacity` entries; `out_len` receives the count.
 *
 * # Safety
 * `embeddings` must point to `n * dim` readable doubles and `out_indices`
 * to `out_capacity` writable slots.
 */
enum ProagymStatus proagym_select_label_targets(const double *embeddings,
                                                size_t n,
                                                size_t dim,
                                                size_t k,
                                                size_t *out_indices,
                                                size_t out_capacity,
                                                size_t *out_len);

/**
 * Parse one event line and re-emit it in canonical form.
 *
 * # Safety
 * `line` must be a NUL-terminated string and `out_json` valid for writes.
 */
enum ProagymStatus proagym_event_normalize(const char *line, char **out_json);

/**
 * Parse a raw activity-monitor export (JSON array or JSONL) and merge it into
 * segments, returned as a JSON array.
 *
 * # Safety
 * `raw_json` must be a NUL-terminated string and `out_json` valid for
 * writes.
 */
enum ProagymStatus proagym_ingest_merge(const char *raw_json,
                                        double gap_threshold_secs,
                                        double max_span_secs,
                                        char **out_json);

/**
 * Open an annotation store directory created by `proagym annotate init`.
 * Mixed need votes resolve to "needed".
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` valid for writes.
 */
enum ProagymStatus proagym_store_open(const char *dir, struct ProagymStore **out);

/**
 * Record one vote, given in the HTTP wire format.
 *
 * # Safety
 * `store` must come from [`proagym_store_open`]; the strings must be
 * NUL-terminated.
 */
enum ProagymStatus proagym_store_vote(const struct ProagymStore *store,
                                      const char *item_id,
                                      const char *vote_json);

/**
 * Store statistics as a JSON object.
 *
 * # Safety
 * `store` must come from [`proagym_store_open`] and `out_json` be valid
 * for writes.
 */
enum ProagymStatus proagym_store_stats_json(const struct ProagymStore *store, char **out_json);

/**
 * Training rows for every resolved item, one JSON object per line.
 *
 * # Safety
 * `store` must come from [`proagym_store_open`] and `out_jsonl` be valid
 * for writes.
 */
enum ProagymStatus proagym_store_export_jsonl(const struct ProagymStore *store, char **out_jsonl);

/**
 * Close a store handle. Null is ignored.
 *
 * # Safety
 * `store` must be null or a handle from [`proagym_store_open`] that has
 * not been freed.
 */
void proagym_store_free(struct ProagymStore *store);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROAGYM_H */
