#ifndef CAUSALPROTO_H
#define CAUSALPROTO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CP_OK 0

#define CP_NULL_POINTER 1

#define CP_INVALID_ARGUMENT 2

#define CP_IO_ERROR 3

#define CP_CHECKPOINT_ERROR 4

#define CP_INTERNAL_ERROR 5

/*
 A loaded model. Create with [`cp_model_load`], release with [`cp_model_free`].
 */
typedef struct CpModel CpModel;

typedef struct CpMetrics {
  double acc;
  double bacc;
  double macro_f1;
} CpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a checkpoint written by `causalproto train`.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
int32_t cp_model_load(const char *path, struct CpModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `model` must come from [`cp_model_load`] and not be used afterwards.
 */
void cp_model_free(struct CpModel *model);

/*
 Number of classes, or 0 for a null model.

 # Safety
 `model` must be null or a live handle.
 */
size_t cp_model_num_classes(const struct CpModel *model);

/*
 Dimension of the causal latent, or 0 for a null model.

 # Safety
 `model` must be null or a live handle.
 */
size_t cp_model_latent_dim(const struct CpModel *model);

/*
 Side length of the square images the model was trained on, or 0.

 # Safety
 `model` must be null or a live handle.
 */
size_t cp_model_image_size(const struct CpModel *model);

/*
 Class probabilities for `n` images, written row-major as `n x num_classes`.

 # Safety
 `pixels` must hold `n * height * width * 3` floats and `probs` `probs_len`
 doubles.
 */
int32_t cp_model_predict(const struct CpModel *model,
                         const float *pixels,
                         size_t n,
                         size_t height,
                         size_t width,
                         double *probs,
                         size_t probs_len);

/*
 Causal latents for `n` images, written row-major as `n x latent_dim`.

 # Safety
 As for [`cp_model_predict`], with `latents` holding `latents_len` doubles.
 */
int32_t cp_model_encode(const struct CpModel *model,
                        const float *pixels,
                        size_t n,
                        size_t height,
                        size_t width,
                        double *latents,
                        size_t latents_len);

/*
 Accuracy, balanced accuracy and macro-F1 of `n` predictions.

 # Safety
 `preds` and `labels` must hold `n` values; `out` must be writable.
 */
int32_t cp_classification_metrics(const size_t *preds,
                                  const size_t *labels,
                                  size_t n,
                                  size_t num_classes,
                                  struct CpMetrics *out);

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call into the library from the same thread.
 */
const char *cp_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *cp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAUSALPROTO_H */
