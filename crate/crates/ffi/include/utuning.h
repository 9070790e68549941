#ifndef UTUNING_H
#define UTUNING_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UtStatus {
  UT_STATUS_OK = 0,
  UT_STATUS_NULL_POINTER = 1,
  UT_STATUS_INVALID_UTF8 = 2,
  UT_STATUS_DIMENSION = 3,
  UT_STATUS_CONFIG = 4,
  UT_STATUS_FORMAT = 5,
  UT_STATUS_IO = 6,
  UT_STATUS_NUMERIC = 7,
  UT_STATUS_CONTRACT = 8,
  UT_STATUS_BUFFER_TOO_SMALL = 9,
  UT_STATUS_PANIC = 10,
} UtStatus;

/*
 Opaque backbone handle.
 */
typedef struct UtBackbone UtBackbone;

/*
 Opaque composed-model handle (frozen backbone plus tuners).
 */
typedef struct UtModel UtModel;

typedef struct UtDims {
  size_t layers;
  size_t width;
  size_t heads;
  size_t tokens;
  size_t input_width;
  size_t classes;
} UtDims;

typedef struct UtParamCount {
  size_t head;
  size_t tuners;
  size_t frozen;
  size_t trainable;
} UtParamCount;

typedef struct UtEquivalenceSummary {
  size_t cases;
  size_t failed;
  double max_diff_prefix;
  double max_diff_prompt;
  double max_diff_adapter;
  double max_gate_error;
} UtEquivalenceSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *ut_last_error_message(void);

/*
 Library version, a static NUL-terminated string.
 */
const char *ut_version(void);

/*
 Randomly initialised backbone from a preset name (`desk`, `vitb16`, `tiny`) or JSON config.
 */
enum UtStatus ut_backbone_new(const char *config, uint64_t seed, struct UtBackbone **out);

/*
 Loads the backbone tensors of a checkpoint file.
 */
enum UtStatus ut_backbone_load(const char *path, struct UtBackbone **out);

enum UtStatus ut_backbone_save(const struct UtBackbone *backbone, const char *path);

/*
 Releases a backbone; null is ignored.

 # Safety
 `backbone` is null or a live handle from this library, not used afterwards.
 */
void ut_backbone_free(struct UtBackbone *backbone);

/*
 Freezes a copy of `backbone` and attaches tuners from a preset name or JSON config.
 */
enum UtStatus ut_model_compose(const struct UtBackbone *backbone,
                               const char *config,
                               uint64_t seed,
                               struct UtModel **out);

enum UtStatus ut_model_load(const char *path, struct UtModel **out);

enum UtStatus ut_model_save(const struct UtModel *model, const char *path);

/*
 Releases a model; null is ignored.

 # Safety
 `model` is null or a live handle from this library, not used afterwards.
 */
void ut_model_free(struct UtModel *model);

enum UtStatus ut_model_dims(const struct UtModel *model, struct UtDims *out);

enum UtStatus ut_model_trainable_params(const struct UtModel *model, size_t *out);

/*
 Logits for `batch` samples. `input` holds `batch × tokens × input_width`
 doubles, `output` receives `batch × classes` doubles.
 With `frozen` nonzero the tuners are bypassed.

 # Safety
 `input` points to that many readable doubles and `output` to `output_len` writable ones.
 */
enum UtStatus ut_model_forward(const struct UtModel *model,
                               const double *input,
                               size_t batch,
                               double *output,
                               size_t output_len,
                               int32_t frozen);

/*
 Shape-only parameter count for a backbone and tuner config (preset names or JSON).
 */
enum UtStatus ut_count_params(const char *backbone, const char *tuners, struct UtParamCount *out);

/*
 Runs `cases` randomized equivalence cases per tuner type.
 Returns `UT_STATUS_OK` even when cases fail; check `failed`.
 */
enum UtStatus ut_verify_equivalence(size_t cases,
                                    uint64_t seed,
                                    int32_t break_gate,
                                    struct UtEquivalenceSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UTUNING_H */
