#ifndef WFE_H
#define WFE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WfeBasis {
  WFE_BASIS_RECALL = 0,
  WFE_BASIS_F1 = 1,
} WfeBasis;

typedef enum WfeDecodeMode {
  WFE_DECODE_MODE_BASELINE = 0,
  WFE_DECODE_MODE_WFE = 1,
} WfeDecodeMode;

typedef enum WfeRougeVariant {
  WFE_ROUGE_VARIANT_ONE = 0,
  WFE_ROUGE_VARIANT_TWO = 1,
  WFE_ROUGE_VARIANT_L = 2,
} WfeRougeVariant;

typedef enum WfeStatus {
  WFE_STATUS_OK = 0,
  WFE_STATUS_NULL_POINTER = 1,
  WFE_STATUS_INVALID_ARGUMENT = 2,
  WFE_STATUS_IO = 3,
  WFE_STATUS_FORMAT = 4,
  WFE_STATUS_SHAPE = 5,
  WFE_STATUS_STATE = 6,
  WFE_STATUS_BUFFER_TOO_SMALL = 7,
  WFE_STATUS_PANIC = 8,
} WfeStatus;

// Opaque model handle.
typedef struct WfeModel WfeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *wfe_last_error(void);

// Loads a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum WfeStatus wfe_model_load(const char *path, struct WfeModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from [`wfe_model_load`] and not be used afterwards.
void wfe_model_free(struct WfeModel *model);

// Target vocabulary size and whether the estimation head is present.
//
// # Safety
// Pointers must be valid; `has_wfe` may be null.
enum WfeStatus wfe_model_info(const struct WfeModel *model, size_t *vocab_size, bool *has_wfe);

// Beam-decodes `src` and writes the best output (without BOS/EOS) to `out`.
// `max_len` 0 selects the default. When `out_cap` is too small, `*out_len`
// holds the needed length and the status is `BufferTooSmall`.
//
// # Safety
// `src` must hold `src_len` ids, `out` room for `out_cap` ids; `score` may be null.
enum WfeStatus wfe_model_decode(const struct WfeModel *model,
                                const uint32_t *src,
                                size_t src_len,
                                size_t beam,
                                enum WfeDecodeMode mode,
                                size_t max_len,
                                uint32_t *out,
                                size_t out_cap,
                                size_t *out_len,
                                double *score);

// Frequency estimate for `src`: any of `r_hat`, `g_hat`, `a_hat` may be
// null, the others must hold `len` = target vocabulary size values.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum WfeStatus wfe_model_estimate(const struct WfeModel *model,
                                  const uint32_t *src,
                                  size_t src_len,
                                  double *r_hat,
                                  double *g_hat,
                                  double *a_hat,
                                  size_t len);

// ROUGE of one whitespace-tokenized candidate against one reference.
//
// # Safety
// Strings must be NUL-terminated; `out` must be valid.
enum WfeStatus wfe_rouge(const char *candidate,
                         const char *reference,
                         enum WfeRougeVariant variant,
                         enum WfeBasis basis,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WFE_H */
