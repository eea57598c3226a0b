#ifndef TTM_H
#define TTM_H

#pragma once

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum TtmStatus {
  TTM_STATUS_OK = 0,
  TTM_STATUS_NULL_POINTER = 1,
  TTM_STATUS_INVALID_ARGUMENT = 2,
  TTM_STATUS_SHAPE_MISMATCH = 3,
  TTM_STATUS_IO = 4,
  TTM_STATUS_CHECKPOINT = 5,
  TTM_STATUS_DIVERGED = 6,
  TTM_STATUS_BUFFER_TOO_SMALL = 7,
  TTM_STATUS_INTERNAL = 8,
  TTM_STATUS_PANIC = 9,
} TtmStatus;

typedef enum TtmRegime {
  TTM_REGIME_DUAL_CLOCK = 0,
  TTM_REGIME_SINGLE_CLOCK = 1,
  TTM_REGIME_REPAINT_STYLE = 2,
  TTM_REGIME_UNCONSTRAINED_BG = 3,
} TtmRegime;

typedef struct TtmDenoiser TtmDenoiser;

typedef struct TtmImage TtmImage;

typedef struct TtmMotionSpec TtmMotionSpec;

typedef struct TtmReference TtmReference;

typedef struct TtmVideo TtmVideo;

// Dimensions of a video in `(frames, channels, height, width)` order.
typedef struct TtmDims {
  size_t frames;
  size_t channels;
  size_t height;
  size_t width;
} TtmDims;

// Sampler settings. `shared_epsilon` nonzero reuses the initialization
// noise for the reference instead of drawing fresh noise per step.
typedef struct TtmSamplerConfig {
  size_t t_weak;
  size_t t_strong;
  enum TtmRegime regime;
  uint64_t seed;
  uint8_t shared_epsilon;
} TtmSamplerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The message of the last failed call on this thread; empty after a
// successful call. Valid until the next call on this thread.
const char *ttm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ttm_version(void);

// # Safety
// `data` must point to `3 * height * width` floats in `(3, H, W)` order.
enum TtmStatus ttm_image_new(const float *data,
                             size_t height,
                             size_t width,
                             struct TtmImage **out_image);

// # Safety
// `path` must be a NUL-terminated string.
enum TtmStatus ttm_image_load(const char *path, struct TtmImage **out_image);

// # Safety
// `image` must come from `ttm_image_new` or `ttm_image_load`.
enum TtmStatus ttm_image_dims(const struct TtmImage *image, size_t *height, size_t *width);

// # Safety
// `image` must be null or a live handle; it is invalid afterwards.
void ttm_image_free(struct TtmImage *image);

// Parses and validates the JSON motion spec document.
//
// # Safety
// `json` must be a NUL-terminated string.
enum TtmStatus ttm_spec_from_json(const char *json, struct TtmMotionSpec **out_spec);

// # Safety
// `spec` must be null or a live handle.
void ttm_spec_free(struct TtmMotionSpec *spec);

// Builds the warped reference video and mask.
//
// # Safety
// Handles must be live.
enum TtmStatus ttm_warp(const struct TtmImage *image,
                        const struct TtmMotionSpec *spec,
                        struct TtmReference **out_reference);

// # Safety
// `reference` must be a live handle; `out_dims` must be writable.
enum TtmStatus ttm_reference_dims(const struct TtmReference *reference, struct TtmDims *out_dims);

// Copies the reference frames into `buf` (`frames * 3 * H * W` floats).
//
// # Safety
// `buf` must have room for `len` floats.
enum TtmStatus ttm_reference_frames(const struct TtmReference *reference, float *buf, size_t len);

// Copies the mask video into `buf` (`frames * H * W` bytes, 0 or 1).
//
// # Safety
// `buf` must have room for `len` bytes.
enum TtmStatus ttm_reference_mask(const struct TtmReference *reference, uint8_t *buf, size_t len);

// Writes the reference content hash (hex, NUL-terminated) into `buf` when
// `len` suffices; returns the required size, or 0 for a null handle.
//
// # Safety
// `buf` must be null or have room for `len` bytes.
size_t ttm_reference_content_hash(const struct TtmReference *reference, char *buf, size_t len);

// # Safety
// `reference` must be null or a live handle.
void ttm_reference_free(struct TtmReference *reference);

// Loads a toy denoiser checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string.
enum TtmStatus ttm_denoiser_load_toy(const char *path, struct TtmDenoiser **out_denoiser);

// The analytic denoiser for i.i.d. Gaussian data on a cosine schedule.
//
// # Safety
// `out_denoiser` must be writable.
enum TtmStatus ttm_denoiser_gaussian(double mean,
                                     double variance,
                                     size_t steps,
                                     struct TtmDenoiser **out_denoiser);

// Number of diffusion steps `T` of the denoiser's schedule, or 0 for null.
//
// # Safety
// `denoiser` must be null or a live handle.
size_t ttm_denoiser_steps(const struct TtmDenoiser *denoiser);

// # Safety
// `denoiser` must be null or a live handle.
void ttm_denoiser_free(struct TtmDenoiser *denoiser);

// Dual-clock sampling guided by `reference`, conditioned on `image`.
//
// # Safety
// Handles must be live; `config` must be readable.
enum TtmStatus ttm_sample(const struct TtmDenoiser *denoiser,
                          const struct TtmReference *reference,
                          const struct TtmImage *image,
                          const struct TtmSamplerConfig *config,
                          struct TtmVideo **out_video);

// # Safety
// `video` must be a live handle; `out_dims` must be writable.
enum TtmStatus ttm_video_dims(const struct TtmVideo *video, struct TtmDims *out_dims);

// # Safety
// `buf` must have room for `len` floats.
enum TtmStatus ttm_video_data(const struct TtmVideo *video, float *buf, size_t len);

// Content hash of the video, as recorded in run manifests. Same buffer
// protocol as `ttm_reference_content_hash`.
//
// # Safety
// `buf` must be null or have room for `len` bytes.
size_t ttm_video_hash(const struct TtmVideo *video, char *buf, size_t len);

// # Safety
// `video` must be null or a live handle.
void ttm_video_free(struct TtmVideo *video);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTM_H */
