#ifndef DEAPSAM_H
#define DEAPSAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

#define DEAP_OK 0

#define DEAP_ERR_NULL -1

#define DEAP_ERR_UTF8 -2

#define DEAP_ERR_PANIC -3

#define DEAP_ERR_BUFFER -4

#define DEAP_ERR_SHAPE 2

#define DEAP_ERR_AXIS 3

#define DEAP_ERR_NON_FINITE 4

#define DEAP_ERR_NON_SCALAR_LOSS 5

#define DEAP_ERR_NON_DETERMINISTIC 6

#define DEAP_ERR_BAD_MAGIC 7

#define DEAP_ERR_HEADER 8

#define DEAP_ERR_PAYLOAD 9

#define DEAP_ERR_NON_FINITE_VOXEL 10

#define DEAP_ERR_INVALID_ARGUMENT 11

#define DEAP_ERR_CONFIG 12

#define DEAP_ERR_UNKNOWN_PARAMETER 13

#define DEAP_ERR_MISSING_PARAMETER 14

#define DEAP_ERR_NON_FINITE_GRADIENT 15

#define DEAP_ERR_DIVERGED 16

#define DEAP_ERR_IO 17

// Run configuration.
typedef struct DeapConfig DeapConfig;

// Binary mask.
typedef struct DeapMask DeapMask;

// A model with its configuration and optimizer state.
typedef struct DeapModel DeapModel;

// Image volume, `f32` voxels, channels last.
typedef struct DeapVolume DeapVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *deap_version(void);

// Message for the last failed call on this thread; empty after a success.
// Valid until the next `deap_*` call on the same thread.
const char *deap_last_error(void);

// Default configuration.
//
// # Safety
// `out` must be valid for writes.
int32_t deap_config_new(DeapConfig **out);

// Defaults overridden by `key=value` lines, validated.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be valid for writes.
int32_t deap_config_parse(const char *text, DeapConfig **out);

// Sets one key. The config is left unchanged on failure.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
int32_t deap_config_set(DeapConfig *cfg, const char *key, const char *value);

// Writes the full `key=value` text, NUL-terminated, into `buf`.
// `out_len` receives the required size including the NUL, also when `buf`
// is too small (then `DEAP_ERR_BUFFER` is returned). `buf` may be null
// when `cap` is 0.
//
// # Safety
// `buf` must be valid for `cap` bytes; `out_len` must be valid for writes.
int32_t deap_config_text(const DeapConfig *cfg, char *buf, size_t cap, size_t *out_len);

// # Safety
// `cfg` must come from this library or be null.
void deap_config_free(DeapConfig *cfg);

// Volume from `dims[0] * dims[1] * dims[2] * channels` voxels, channels last.
//
// # Safety
// `dims` must hold 3 values; `data` must hold `len` values.
int32_t deap_volume_new(const size_t *dims,
                        size_t channels,
                        const float *data,
                        size_t len,
                        DeapVolume **out);

// # Safety
// `path` must be NUL-terminated; `out` must be valid for writes.
int32_t deap_volume_read(const char *path, DeapVolume **out);

// # Safety
// `v` must come from this library; `path` must be NUL-terminated.
int32_t deap_volume_write(const DeapVolume *v, const char *path);

// # Safety
// `out_dims` must be valid for 3 writes; `out_channels` for one.
int32_t deap_volume_dims(const DeapVolume *v, size_t *out_dims, size_t *out_channels);

// # Safety
// `v` must come from this library or be null.
void deap_volume_free(DeapVolume *v);

// Mask from `dims[0] * dims[1] * dims[2]` bytes, each 0 or 1.
//
// # Safety
// `dims` must hold 3 values; `data` must hold `len` bytes.
int32_t deap_mask_new(const size_t *dims, const uint8_t *data, size_t len, DeapMask **out);

// # Safety
// `path` must be NUL-terminated; `out` must be valid for writes.
int32_t deap_mask_read(const char *path, DeapMask **out);

// # Safety
// `m` must come from this library; `path` must be NUL-terminated.
int32_t deap_mask_write(const DeapMask *m, const char *path);

// Copies the voxels (0 or 1) into `buf`; `out_len` receives the voxel count.
//
// # Safety
// `buf` must be valid for `cap` bytes; `out_len` must be valid for writes.
int32_t deap_mask_data(const DeapMask *m, uint8_t *buf, size_t cap, size_t *out_len);

// # Safety
// `m` must come from this library or be null.
void deap_mask_free(DeapMask *m);

// Synthetic phantom: image volume and its lesion mask.
//
// # Safety
// `dims` must hold 3 values; both outputs must be valid for writes.
int32_t deap_phantom(uint64_t seed,
                     const size_t *dims,
                     size_t lesions,
                     double noise_sd,
                     DeapVolume **out_volume,
                     DeapMask **out_mask);

// Freshly initialized model for `cfg`, in the precision it names.
//
// # Safety
// `cfg` must come from this library; `out` must be valid for writes.
int32_t deap_model_new(const DeapConfig *cfg, DeapModel **out);

// Model restored from a checkpoint file of either precision.
//
// # Safety
// `path` must be NUL-terminated; `out` must be valid for writes.
int32_t deap_model_load(const char *path, DeapModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
int32_t deap_model_save(const DeapModel *model, const char *path);

// Foreground probabilities, one per voxel in `H, W, D` order.
// `out_len` receives the voxel count.
//
// # Safety
// `buf` must be valid for `cap` floats; `out_len` must be valid for writes.
int32_t deap_model_predict(const DeapModel *model,
                           const DeapVolume *volume,
                           float *buf,
                           size_t cap,
                           size_t *out_len);

// # Safety
// `model` must come from this library or be null.
void deap_model_free(DeapModel *model);

// Thresholds probabilities at 0.5 (ties to foreground).
//
// # Safety
// `dims` must hold 3 values; `probs` must hold their product.
int32_t deap_mask_from_probabilities(const size_t *dims,
                                     const float *probs,
                                     size_t len,
                                     DeapMask **out);

// DICE and NSD (tolerance `tau` voxels) of `pred` against `gt`.
//
// # Safety
// Masks must come from this library; outputs must be valid for writes.
int32_t deap_metrics(const DeapMask *pred,
                     const DeapMask *gt,
                     double tau,
                     double *out_dice,
                     double *out_nsd);

// `(full - shared) / full` FLOPs of the dual prompter on `feature = [H, W, D, C]`
// with `tokens` reduced tokens.
//
// # Safety
// `feature` must hold 4 values; `out` must be valid for writes.
int32_t deap_sharing_reduction(const size_t *feature,
                               size_t tokens,
                               uint64_t flops_per_mac,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEAPSAM_H */
