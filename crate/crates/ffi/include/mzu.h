#ifndef MZU_H
#define MZU_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MzuStatus {
  MZU_STATUS_OK = 0,
  /*
   Null pointer, non-UTF-8 path or a zero-sized request.
   */
  MZU_STATUS_INVALID_ARGUMENT = 1,
  /*
   Invalid settings, or a checkpoint of the wrong task.
   */
  MZU_STATUS_CONFIG = 2,
  /*
   Unusable input text or data.
   */
  MZU_STATUS_DATA = 3,
  /*
   Malformed checkpoint.
   */
  MZU_STATUS_FORMAT = 4,
  MZU_STATUS_IO = 5,
  /*
   Shape mismatch or non-finite values.
   */
  MZU_STATUS_NUMERIC = 6,
  /*
   Output buffer smaller than required.
   */
  MZU_STATUS_BUFFER_TOO_SMALL = 7,
  /*
   A panic was caught at the boundary.
   */
  MZU_STATUS_INTERNAL = 8,
} MzuStatus;

/*
 A loaded language model.
 */
typedef struct MzuModel MzuModel;

/*
 A relevance map: `rows` query positions by `cols` context positions.
 */
typedef struct MzuRelevance MzuRelevance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread; empty after a success. The
 pointer stays valid until the next call into this library on the same
 thread.
 */
const char *mzu_last_error(void);

/*
 Loads a language-model checkpoint written by `mzu train`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MzuStatus mzu_model_load(const char *path, struct MzuModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `model` must come from [`mzu_model_load`] and not be used afterwards.
 */
void mzu_model_free(struct MzuModel *model);

/*
 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum MzuStatus mzu_model_param_count(const struct MzuModel *model, size_t *out);

/*
 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum MzuStatus mzu_model_vocab_size(const struct MzuModel *model, size_t *out);

/*
 Bits per character of `text` (one stream, state carried throughout).

 # Safety
 `text` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum MzuStatus mzu_evaluate_bpc(const struct MzuModel *model,
                                const uint8_t *text,
                                size_t len,
                                double *out);

/*
 Relevance of the last `last_q` positions of `text` against every
 earlier hidden state.

 # Safety
 `text` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum MzuStatus mzu_relevance_map(const struct MzuModel *model,
                                 const uint8_t *text,
                                 size_t len,
                                 size_t last_q,
                                 struct MzuRelevance **out);

/*
 # Safety
 `map` must be a live handle; `rows` and `cols` valid pointers.
 */
enum MzuStatus mzu_relevance_dims(const struct MzuRelevance *map, size_t *rows, size_t *cols);

/*
 Copies the map row-major into `buf` (`rows · cols` values). Cells at or
 after a row's query position are NaN.

 # Safety
 `buf` must point to `buf_len` writable doubles.
 */
enum MzuStatus mzu_relevance_copy(const struct MzuRelevance *map, double *buf, size_t buf_len);

/*
 Releases a map; null is ignored.

 # Safety
 `map` must come from [`mzu_relevance_map`] and not be used afterwards.
 */
void mzu_relevance_free(struct MzuRelevance *map);

/*
 `D_zone` of `n` zones of `width` values each, stored row-major: the
 negated mean cosine over all ordered zone pairs, self pairs included.

 # Safety
 `zones` must point to `n · width` readable doubles and `out` be valid.
 */
enum MzuStatus mzu_zone_disagreement(const double *zones, size_t n, size_t width, double *out);

/*
 Library version, a static NUL-terminated string.
 */
const char *mzu_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MZU_H */
