#ifndef EVENTDISTILL_H
#define EVENTDISTILL_H

/* Generated by cbindgen from the eventdistill-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdStatus {
  ED_STATUS_OK = 0,
  ED_STATUS_NULL_POINTER = 1,
  ED_STATUS_CONFIG = 2,
  ED_STATUS_DATA = 3,
  ED_STATUS_NUMERIC = 4,
  ED_STATUS_IO = 5,
  ED_STATUS_SHAPE = 6,
  ED_STATUS_INDEX = 7,
  ED_STATUS_PANIC = 8,
  ED_STATUS_OTHER = 9,
} EdStatus;

/**
 * A trained peer loaded from a checkpoint file.
 */
typedef struct EdPeer EdPeer;

typedef struct EdMetrics {
  double hr_at_5;
  double hr_at_10;
  double ndcg_at_5;
  double ndcg_at_10;
  double mrr;
  size_t count;
} EdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ed_last_error_message(void);

/**
 * Softmax of `n` logits into `out`.
 *
 * # Safety
 * `z` and `out` must each point to `n` doubles.
 */
enum EdStatus ed_softmax(const double *z, size_t n, double *out);

/**
 * Target and non-target probability mass.
 *
 * # Safety
 * `z` must point to `n` doubles; `p_target` and `p_rest` must be writable.
 */
enum EdStatus ed_decouple_target(const double *z,
                                 size_t n,
                                 size_t target,
                                 double *p_target,
                                 double *p_rest);

/**
 * Distribution over the entries whose `masked` flag is zero. The target
 * must be flagged. Masked entries of `out` are set to zero.
 *
 * # Safety
 * `z`, `masked` and `out` must each point to `n` elements.
 */
enum EdStatus ed_nontarget_distribution(const double *z,
                                        size_t n,
                                        size_t target,
                                        const uint8_t *masked,
                                        double *out);

/**
 * Decoupled distillation loss of a student against a constant teacher.
 * `grad` may be null; otherwise it receives the gradient with respect to
 * the student logits.
 *
 * # Safety
 * `z_student` and `z_teacher` must point to `n` doubles, `loss` must be
 * writable, and a non-null `grad` must point to `n` writable doubles.
 */
enum EdStatus ed_dkd_loss(const double *z_student,
                          const double *z_teacher,
                          size_t n,
                          size_t target,
                          double beta,
                          double *loss,
                          double *grad);

/**
 * 1-based rank of `scores[target]` with ties counted against it.
 *
 * # Safety
 * `scores` must point to `n` doubles and `rank` must be writable.
 */
enum EdStatus ed_rank_of_target(const double *scores, size_t n, size_t target, size_t *rank);

/**
 * HR, NDCG at 5 and 10 and MRR of `n` 1-based ranks.
 *
 * # Safety
 * `ranks` must point to `n` values and `out` must be writable.
 */
enum EdStatus ed_metrics_from_ranks(const size_t *ranks, size_t n, struct EdMetrics *out);

/**
 * Loads a peer checkpoint (`peerK.json` inside a run checkpoint).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` must be writable. The
 * handle written to `out` must be released with [`ed_peer_free`].
 */
enum EdStatus ed_peer_load(const char *path, struct EdPeer **out);

/**
 * Number of event classes the peer scores.
 *
 * # Safety
 * `peer` must be a live handle and `out` writable.
 */
enum EdStatus ed_peer_n_classes(const struct EdPeer *peer, size_t *out);

/**
 * Next-event logits for one history of class ids.
 *
 * # Safety
 * `peer` must be a live handle, `history` must point to `len` ids and
 * `out` to `out_len` writable doubles, where `out_len` equals the class
 * count.
 */
enum EdStatus ed_peer_score(const struct EdPeer *peer,
                            const uint32_t *history,
                            size_t len,
                            double *out,
                            size_t out_len);

/**
 * Releases a handle from [`ed_peer_load`]. Null is ignored.
 *
 * # Safety
 * `peer` must be null or a handle not yet freed.
 */
void ed_peer_free(struct EdPeer *peer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVENTDISTILL_H */
