#ifndef GASVSF_H
#define GASVSF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum GasvsfStatus {
  GASVSF_STATUS_OK = 0,
  GASVSF_STATUS_NULL_POINTER = 1,
  GASVSF_STATUS_INVALID_ARGUMENT = 2,
  GASVSF_STATUS_SHAPE = 3,
  GASVSF_STATUS_IO = 4,
  GASVSF_STATUS_FORMAT = 5,
  GASVSF_STATUS_CONFIG = 6,
  GASVSF_STATUS_NON_FINITE = 7,
  GASVSF_STATUS_CHECK = 8,
  GASVSF_STATUS_BUFFER_TOO_SMALL = 9,
  GASVSF_STATUS_PANIC = 10,
} GasvsfStatus;

/**
 * Generated or loaded clip.
 */
typedef struct GasvsfClip GasvsfClip;

/**
 * Trained detector.
 */
typedef struct GasvsfModel GasvsfModel;

/**
 * One detection in native clip pixels.
 */
typedef struct GasvsfDetection {
  size_t frame;
  double x1;
  double y1;
  double x2;
  double y2;
  double score;
} GasvsfDetection;

/**
 * Message of the last failed call on this thread (empty after a success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *gasvsf_last_error(void);

/**
 * Data-level temporal bias of channel `i` at frame `t` of `frames`.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum GasvsfStatus gasvsf_bias_data(size_t i, size_t t, size_t frames, double *out);

/**
 * Feature-level temporal bias of channel `i` of `channels`.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum GasvsfStatus gasvsf_bias_fea(size_t i, size_t channels, double *out);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must point to four doubles, `out` to one.
 */
enum GasvsfStatus gasvsf_iou(const double *a, const double *b, double *out);

/**
 * Voxel shift of one `[C, H, W, T]` volume. `offsets` is null or a
 * `[3, H, W, T]` field of `(dx, dy, dt)`; `schedule` adds a temporal bias
 * (0 none, 1 data-level, 2 feature-level); bits 0, 1, 2 of `mask` enable
 * the x, y, t components. `out` receives `C·H·W·T` values.
 *
 * # Safety
 * `x` and `out` must hold `C·H·W·T` doubles and `offsets`, when not null,
 * `3·H·W·T`.
 */
enum GasvsfStatus gasvsf_vsf_shift(const double *x,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   size_t frames,
                                   const double *offsets,
                                   uint32_t schedule,
                                   uint32_t mask,
                                   double *out);

/**
 * Generates clip `index` of `seed`. `config` is null (defaults) or
 * `key = value` text with dotted keys such as `generator.frames = 4`.
 *
 * # Safety
 * `config` must be null or NUL-terminated; `out` must be valid.
 */
enum GasvsfStatus gasvsf_clip_generate(uint64_t seed,
                                       uint64_t index,
                                       const char *config,
                                       struct GasvsfClip **out);

/**
 * Reads a clip directory.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be valid.
 */
enum GasvsfStatus gasvsf_clip_read(const char *dir, struct GasvsfClip **out);

/**
 * Releases a clip; null is ignored.
 *
 * # Safety
 * `clip` must come from this library and not be used afterwards.
 */
void gasvsf_clip_free(struct GasvsfClip *clip);

/**
 * Frame size and count.
 *
 * # Safety
 * All pointers must be valid.
 */
enum GasvsfStatus gasvsf_clip_dims(const struct GasvsfClip *clip,
                                   size_t *width,
                                   size_t *height,
                                   size_t *frames);

/**
 * Copies frame `frame` (row-major gray values) into `buf` of `len` bytes.
 *
 * # Safety
 * `buf` must hold `len` bytes.
 */
enum GasvsfStatus gasvsf_clip_frame(const struct GasvsfClip *clip,
                                    size_t frame,
                                    uint8_t *buf,
                                    size_t len);

/**
 * Annotated box of `frame` as `[x1, y1, x2, y2]`; `present` is set to 0
 * when the frame has no visible gas.
 *
 * # Safety
 * `bbox` must hold four doubles and `present` be valid.
 */
enum GasvsfStatus gasvsf_clip_box(const struct GasvsfClip *clip,
                                  size_t frame,
                                  double *bbox,
                                  int32_t *present);

/**
 * Loads a model directory written by training.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be valid.
 */
enum GasvsfStatus gasvsf_model_load(const char *dir, struct GasvsfModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void gasvsf_model_free(struct GasvsfModel *model);

/**
 * Runs the detector over a clip. `count` receives the number of
 * detections; when it exceeds `capacity` nothing is copied and
 * `BufferTooSmall` is returned, so a call with zero capacity sizes the
 * buffer.
 *
 * # Safety
 * `out` must hold `capacity` detections (may be null when zero).
 */
enum GasvsfStatus gasvsf_model_detect(const struct GasvsfModel *model,
                                      const struct GasvsfClip *clip,
                                      struct GasvsfDetection *out,
                                      size_t capacity,
                                      size_t *count);

#endif  /* GASVSF_H */
