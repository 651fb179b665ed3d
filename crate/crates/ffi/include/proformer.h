#ifndef PROFORMER_H
#define PROFORMER_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result codes. Zero is success.
 */
enum PfStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_UTF8 = 2,
  PF_STATUS_BUFFER_TOO_SMALL = 3,
  PF_STATUS_EMPTY_TOKEN = 10,
  PF_STATUS_EMPTY_INPUT = 11,
  PF_STATUS_INVALID_CONFIG = 12,
  PF_STATUS_SHAPE_MISMATCH = 13,
  PF_STATUS_IO = 20,
  PF_STATUS_CRC_MISMATCH = 21,
  PF_STATUS_VERSION_UNSUPPORTED = 22,
  PF_STATUS_TRUNCATED = 23,
  PF_STATUS_BAD_MAGIC = 24,
  PF_STATUS_MALFORMED_MODEL = 25,
  PF_STATUS_OTHER = 90,
  PF_STATUS_PANIC = 99,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum PfStatus PfStatus;
#else
typedef int32_t PfStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/*
 A loaded model. Create with [`pf_model_load`], release with [`pf_model_free`].
 */
typedef struct PfModel PfModel;

/*
 A standalone token projector.
 */
typedef struct PfProjector PfProjector;

/*
 Architecture description, mirrored from the model configuration.
 */
typedef struct PfModelConfig {
  uint32_t projection_bits;
  uint32_t hidden;
  uint32_t layers;
  uint32_t heads;
  uint32_t group_factor;
  uint32_t max_len;
  uint32_t classes;
  uint32_t ffn_dim;
  double dropout;
} PfModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or null. Valid until
 the next call into the library on the same thread.
 */
const char *pf_last_error_message(void);

/*
 Stable name of a status code, e.g. `"crc-mismatch"`; `"unknown"` for
 values outside [`PfStatus`].
 */
const char *pf_status_name(int32_t status);

/*
 Library version string.
 */
const char *pf_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void pf_string_free(char *s);

/*
 Loads a model file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
PfStatus pf_model_load(const char *path, struct PfModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`pf_model_load`] and not have been freed.
 */
void pf_model_free(struct PfModel *model);

/*
 Copies the model's architecture into `out`.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
PfStatus pf_model_config(const struct PfModel *model, struct PfModelConfig *out);

/*
 Number of classes, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t pf_model_num_classes(const struct PfModel *model);

/*
 Name of class `index`, owned by the model; null if out of range.

 # Safety
 `model` must be null or a live handle.
 */
const char *pf_model_class_label(const struct PfModel *model, size_t index);

/*
 Classifies `text`; writes the class index and its softmax probability.

 # Safety
 `model` must be a live handle, `text` NUL-terminated, outputs writable.
 */
PfStatus pf_model_predict(const struct PfModel *model,
                          const char *text,
                          size_t *out_class,
                          double *out_confidence);

/*
 Writes the raw logits for `text` into `out[0..classes]`.

 # Safety
 `model` must be a live handle, `text` NUL-terminated, `out` valid for `len` floats.
 */
PfStatus pf_model_logits(const struct PfModel *model, const char *text, float *out, size_t len);

/*
 Footprint and compute report for `config` at sequence length `seq_len`,
 as a JSON string the caller frees with [`pf_string_free`].

 # Safety
 `config` must be readable; `out` writable.
 */
PfStatus pf_report_json(const struct PfModelConfig *config, size_t seq_len, char **out);

/*
 Creates a projector for `bits`-bit token signatures.

 # Safety
 `out` must be writable.
 */
PfStatus pf_projector_new(size_t bits,
                          size_t max_ngram,
                          size_t skip_distance,
                          uint64_t seed,
                          struct PfProjector **out);

/*
 Releases a projector. Null is ignored.

 # Safety
 `projector` must come from [`pf_projector_new`] and not have been freed.
 */
void pf_projector_free(struct PfProjector *projector);

/*
 Number of 64-bit words in one projection, or 0 for a null handle.

 # Safety
 `projector` must be null or a live handle.
 */
size_t pf_projector_words(const struct PfProjector *projector);

/*
 Projects one token. Bit `i` is bit `i % 64` of word `i / 64`.

 # Safety
 `projector` must be a live handle, `token` NUL-terminated, `out` valid for `len` words.
 */
PfStatus pf_projector_project(const struct PfProjector *projector,
                              const char *token,
                              uint64_t *out,
                              size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROFORMER_H */
