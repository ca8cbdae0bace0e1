#ifndef MOTIONKIT_H
#define MOTIONKIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum MkStatus {
  MK_STATUS_OK = 0,
  MK_STATUS_NULL_POINTER = 1,
  MK_STATUS_INVALID_ARGUMENT = 2,
  MK_STATUS_NUMERIC = 3,
  MK_STATUS_CONFIG = 4,
  MK_STATUS_PARSE = 5,
  MK_STATUS_IO = 6,
  MK_STATUS_PANIC = 7,
  MK_STATUS_BUFFER_TOO_SMALL = 8,
} MkStatus;

/**
 * Absolute sampling coordinates per output pixel.
 */
typedef struct MkFlow MkFlow;

/**
 * Generator model with its parameters.
 */
typedef struct MkModel MkModel;

/**
 * Dense float64 tensor, row-major.
 */
typedef struct MkTensor MkTensor;

/**
 * Affine or thin-plate-spline transform (driving to source coordinates).
 */
typedef struct MkTransform MkTransform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *mk_last_error_message(void);

/**
 * Static, NUL-terminated library version.
 */
const char *mk_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void mk_string_free(char *s);

/**
 * Copies `data` (product of `shape` entries) into a new tensor.
 *
 * # Safety
 * `shape` holds `rank` entries, `data` holds their product, `out` is writable.
 */
enum MkStatus mk_tensor_new(const size_t *shape,
                            size_t rank,
                            const double *data,
                            struct MkTensor **out);

/**
 * # Safety
 * `t` is null or a live tensor handle.
 */
void mk_tensor_free(struct MkTensor *t);

/**
 * Number of dimensions, 0 for a null handle.
 *
 * # Safety
 * `t` is null or a live tensor handle.
 */
size_t mk_tensor_rank(const struct MkTensor *t);

/**
 * Number of elements, 0 for a null handle.
 *
 * # Safety
 * `t` is null or a live tensor handle.
 */
size_t mk_tensor_len(const struct MkTensor *t);

/**
 * Writes the extents into `shape`, which holds `cap` entries.
 *
 * # Safety
 * `shape` is writable for `cap` entries.
 */
enum MkStatus mk_tensor_shape(const struct MkTensor *t, size_t *shape, size_t cap);

/**
 * Copies the elements into `data`, which holds `cap` values.
 *
 * # Safety
 * `data` is writable for `cap` values.
 */
enum MkStatus mk_tensor_copy_data(const struct MkTensor *t, double *data, size_t cap);

/**
 * Reads a binary PGM (as `[1,H,W]`) or PPM (as `[3,H,W]`) with values in [0,1].
 *
 * # Safety
 * `path` is a NUL-terminated string, `out` is writable.
 */
enum MkStatus mk_image_read(const char *path, struct MkTensor **out);

/**
 * Writes a `[1,H,W]` or `[3,H,W]` tensor as 8-bit PGM/PPM.
 *
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum MkStatus mk_image_write(const char *path, const struct MkTensor *image);

/**
 * Peak signal-to-noise ratio in dB; identical inputs give 99.
 *
 * # Safety
 * Handles are live, `out` is writable.
 */
enum MkStatus mk_psnr(const struct MkTensor *a, const struct MkTensor *b, double peak, double *out);

/**
 * Parses transform JSON (`"type": "affine"` or `"tps"`).
 *
 * # Safety
 * `json` is NUL-terminated, `out` is writable.
 */
enum MkStatus mk_transform_from_json(const char *json, struct MkTransform **out);

/**
 * Serializes a transform; release the result with [`mk_string_free`].
 *
 * # Safety
 * `t` is live, `out` is writable.
 */
enum MkStatus mk_transform_to_json(const struct MkTransform *t, char **out);

/**
 * # Safety
 * `t` is null or a live transform handle.
 */
void mk_transform_free(struct MkTransform *t);

/**
 * Maps a point given in normalized coordinates.
 *
 * # Safety
 * `t` is live, `out_xy` is writable for two values.
 */
enum MkStatus mk_transform_apply(const struct MkTransform *t, double x, double y, double *out_xy);

/**
 * Fits the spline with `T(driving_i) = source_i`. Points are `n` interleaved
 * `(x, y)` pairs.
 *
 * # Safety
 * Both point arrays hold `2 * n` values, `out` is writable.
 */
enum MkStatus mk_tps_fit(const double *driving,
                         const double *source,
                         size_t n,
                         double reg,
                         struct MkTransform **out);

/**
 * Affine frame of a heatmap tensor `[H,W]` of nonnegative weights.
 *
 * # Safety
 * `heatmap` is live, `out` is writable.
 */
enum MkStatus mk_affine_from_heatmap(const struct MkTensor *heatmap,
                                     double eps_cov,
                                     struct MkTransform **out);

/**
 * Identity flow of the given extent.
 *
 * # Safety
 * `out` is writable.
 */
enum MkStatus mk_flow_identity(size_t height, size_t width, struct MkFlow **out);

/**
 * Samples a transform on the pixel grid.
 *
 * # Safety
 * `t` is live, `out` is writable.
 */
enum MkStatus mk_flow_from_transform(const struct MkTransform *t,
                                     size_t height,
                                     size_t width,
                                     struct MkFlow **out);

/**
 * `(1 - M) * base + M * motion` with `mask` an `[H,W]` tensor in [0,1].
 *
 * # Safety
 * Handles are live, `out` is writable.
 */
enum MkStatus mk_flow_compose(const struct MkTensor *mask,
                              const struct MkFlow *base,
                              const struct MkFlow *motion,
                              struct MkFlow **out);

/**
 * Backward-warps a `[C,H,W]` tensor.
 *
 * # Safety
 * Handles are live, `out` is writable.
 */
enum MkStatus mk_warp(const struct MkTensor *input,
                      const struct MkFlow *flow,
                      struct MkTensor **out);

/**
 * # Safety
 * `f` is null or a live flow handle.
 */
void mk_flow_free(struct MkFlow *f);

/**
 * Builds a model from config JSON (null for defaults) with freshly
 * initialized parameters.
 *
 * # Safety
 * `config_json` is null or NUL-terminated, `out` is writable.
 */
enum MkStatus mk_model_new(const char *config_json, uint64_t seed, struct MkModel **out);

/**
 * Replaces the parameters with a checkpoint's contents.
 *
 * # Safety
 * `bytes` holds `len` bytes.
 */
enum MkStatus mk_model_load_checkpoint(struct MkModel *m, const uint8_t *bytes, size_t len);

/**
 * Serialized parameters. Pass a null buffer to query the size in `len`.
 *
 * # Safety
 * `buf` is null or writable for `*len` bytes; `len` is writable.
 */
enum MkStatus mk_model_save_checkpoint(const struct MkModel *m, uint8_t *buf, size_t *len);

/**
 * Generates the driving-pose image for a `[3,H,W]` source.
 *
 * # Safety
 * Handles are live, `out` is writable.
 */
enum MkStatus mk_model_generate(const struct MkModel *m,
                                const struct MkTensor *source,
                                const struct MkTransform *transform,
                                double openness,
                                struct MkTensor **out);

/**
 * # Safety
 * `m` is null or a live model handle.
 */
void mk_model_free(struct MkModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTIONKIT_H */
