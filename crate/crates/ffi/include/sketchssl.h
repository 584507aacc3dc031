/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SKETCHSSL_H
#define SKETCHSSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. 1–3 mirror the command-line exit codes.
typedef enum SketchsslStatus {
  SKETCHSSL_STATUS_OK = 0,
  // Invalid configuration or arguments.
  SKETCHSSL_STATUS_USAGE = 1,
  // Malformed input data, checkpoint or shape.
  SKETCHSSL_STATUS_DATA = 2,
  // Training produced a non-finite loss.
  SKETCHSSL_STATUS_DIVERGED = 3,
  SKETCHSSL_STATUS_NULL_POINTER = 4,
  // The output buffer is smaller than the result.
  SKETCHSSL_STATUS_BUFFER_TOO_SMALL = 5,
  SKETCHSSL_STATUS_INVALID_UTF8 = 6,
  // A Rust panic was caught at the boundary.
  SKETCHSSL_STATUS_PANIC = 7,
} SketchsslStatus;

// The encoder half of a pretext checkpoint plus its weights.
typedef struct SketchsslEncoder SketchsslEncoder;

// A rendered image, row-major with interleaved channels.
typedef struct SketchsslRaster SketchsslRaster;

// A validated pen-state stroke sequence.
typedef struct SketchsslStrokes SketchsslStrokes;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sketchssl_version(void);

// Copies the calling thread's last error message (NUL-terminated,
// truncated to `cap`) and returns the full length including the NUL.
// Pass `buf = NULL` to query the length.
//
// # Safety
// `buf` must be NULL or valid for `cap` bytes.
size_t sketchssl_last_error(char *buf, size_t cap);

// Builds a sequence from `n_rows` rows of `(x, y, down, lift, end)` (one-hot pen state) in
// unit-canvas coordinates.
//
// # Safety
// `rows` must point to `5 * n_rows` doubles; `out` must be writable.
enum SketchsslStatus sketchssl_strokes_new(const double *rows,
                                           size_t n_rows,
                                           struct SketchsslStrokes **out);

// Number of points, or 0 for NULL.
//
// # Safety
// `s` must be NULL or a live handle.
size_t sketchssl_strokes_len(const struct SketchsslStrokes *s);

// Writes the `5 * len` row values into `out`.
//
// # Safety
// `s` must be a live handle and `out` valid for `cap` doubles.
enum SketchsslStatus sketchssl_strokes_rows(const struct SketchsslStrokes *s,
                                            double *out,
                                            size_t cap);

// Ramer–Douglas–Peucker simplification of each stroke.
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum SketchsslStatus sketchssl_strokes_simplify(const struct SketchsslStrokes *s,
                                                double epsilon,
                                                struct SketchsslStrokes **out);

// # Safety
// `s` must be NULL or a handle not yet freed.
void sketchssl_strokes_free(struct SketchsslStrokes *s);

// Renders black-on-white at the given canvas size and stroke width.
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum SketchsslStatus sketchssl_render(const struct SketchsslStrokes *s,
                                      size_t height,
                                      size_t width,
                                      size_t stroke_width,
                                      struct SketchsslRaster **out);

// # Safety
// `r` must be a live handle; each output pointer may be NULL.
enum SketchsslStatus sketchssl_raster_shape(const struct SketchsslRaster *r,
                                            size_t *height,
                                            size_t *width,
                                            size_t *channels);

// Copies `height * width * channels` pixel values in `[0, 1]`.
//
// # Safety
// `r` must be a live handle and `out` valid for `cap` doubles.
enum SketchsslStatus sketchssl_raster_pixels(const struct SketchsslRaster *r,
                                             double *out,
                                             size_t cap);

// # Safety
// `r` must be NULL or a handle not yet freed.
void sketchssl_raster_free(struct SketchsslRaster *r);

// Opens a pretext checkpoint directory and keeps its encoder: the image
// encoder of a vectorization run, the sequence encoder of a rasterization
// run.
//
// # Safety
// `dir` must be a NUL-terminated path; `out` must be writable.
enum SketchsslStatus sketchssl_encoder_load(const char *dir, struct SketchsslEncoder **out);

// 1 when the encoder consumes images (rendered from the strokes given to
// [`sketchssl_encoder_embed`]), 0 when it consumes stroke sequences.
//
// # Safety
// `e` must be a live handle.
int sketchssl_encoder_is_image(const struct SketchsslEncoder *e);

// Length of the final-layer feature vector (0 for NULL).
//
// # Safety
// `e` must be NULL or a live handle.
size_t sketchssl_encoder_feature_dim(const struct SketchsslEncoder *e);

// Final-layer features of one sketch.
//
// # Safety
// Handles must be live; `out` valid for `cap` doubles.
enum SketchsslStatus sketchssl_encoder_embed(const struct SketchsslEncoder *e,
                                             const struct SketchsslStrokes *s,
                                             double *out,
                                             size_t cap);

// # Safety
// `e` must be NULL or a handle not yet freed.
void sketchssl_encoder_free(struct SketchsslEncoder *e);

// Leave-one-out retrieval over `n` embeddings of width `dim`: each item
// queries the others. Writes Acc@top1 and mAP@top10. `cosine` selects
// cosine distance instead of Euclidean.
//
// # Safety
// `embeddings` must hold `n * dim` doubles and `labels` `n` values.
enum SketchsslStatus sketchssl_eval_retrieval(const double *embeddings,
                                              const uint32_t *labels,
                                              size_t n,
                                              size_t dim,
                                              int cosine,
                                              double *acc_at_top1,
                                              double *map_at_top10);

// Runs the command line with `argv[0..argc]` (program name first) and
// returns its exit code.
//
// # Safety
// `argv` must hold `argc` NUL-terminated strings.
int sketchssl_cli_dispatch(int argc, const char *const *argv);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SKETCHSSL_H */
