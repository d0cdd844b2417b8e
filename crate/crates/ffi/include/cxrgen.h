#ifndef CXRGEN_H
#define CXRGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum CxrStatus {
  CXR_STATUS_OK = 0,
  CXR_STATUS_NULL_POINTER = 1,
  CXR_STATUS_INVALID_ARGUMENT = 2,
  CXR_STATUS_CODEC = 3,
  CXR_STATUS_SHAPE = 4,
  CXR_STATUS_INGESTION = 5,
  CXR_STATUS_CONFIG = 6,
  CXR_STATUS_STATE = 7,
  CXR_STATUS_IO = 8,
  CXR_STATUS_INTERNAL = 9,
  CXR_STATUS_PANIC = 10,
} CxrStatus;

/**
 * Opaque grayscale image with intensities in `[0, 1]`.
 */
typedef struct CxrImage CxrImage;

/**
 * Opaque label map.
 */
typedef struct CxrLabelMap CxrLabelMap;

/**
 * Opaque segmentation network.
 */
typedef struct CxrSegmenter CxrSegmenter;

/**
 * Per-class overlap scores.
 */
typedef struct CxrScore {
  double jaccard;
  double dice;
  /**
   * Non-zero when the class is absent from both maps.
   */
  uint8_t empty;
} CxrScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *cxr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cxr_version(void);

/**
 * Builds a map from `height * width` row-major class codes.
 *
 * # Safety
 * `codes` must point to `height * width` bytes; `out` must be writable.
 */
enum CxrStatus cxr_label_map_new(size_t height,
                                 size_t width,
                                 const uint8_t *codes,
                                 struct CxrLabelMap **out);

/**
 * # Safety
 * `map` must come from this library and not be used afterwards.
 */
void cxr_label_map_free(struct CxrLabelMap *map);

/**
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_label_map_dims(const struct CxrLabelMap *map, size_t *height, size_t *width);

/**
 * Copies the class codes into `buf`, which must hold `height * width` bytes.
 *
 * # Safety
 * `buf` must be writable for `len` bytes.
 */
enum CxrStatus cxr_label_map_codes(const struct CxrLabelMap *map, uint8_t *buf, size_t len);

/**
 * Encodes with the standard palette as PNG. Release the bytes with [`cxr_bytes_free`].
 *
 * # Safety
 * Output pointers must be writable.
 */
enum CxrStatus cxr_label_map_encode_png(const struct CxrLabelMap *map,
                                        uint8_t **out_bytes,
                                        size_t *out_len);

/**
 * # Safety
 * `bytes`/`len` must come from [`cxr_label_map_encode_png`].
 */
void cxr_bytes_free(uint8_t *bytes, size_t len);

/**
 * # Safety
 * `bytes` must point to `len` readable bytes.
 */
enum CxrStatus cxr_label_map_decode_png(const uint8_t *bytes, size_t len, struct CxrLabelMap **out);

/**
 * Nearest-neighbour resize.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_label_map_resize(const struct CxrLabelMap *map,
                                    size_t height,
                                    size_t width,
                                    struct CxrLabelMap **out);

/**
 * 64x64 centroid dot map with disks of `radius` cells.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_dot_map(const struct CxrLabelMap *map, size_t radius, struct CxrLabelMap **out);

/**
 * Jaccard and Dice of one class between two maps of equal size.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_score(const struct CxrLabelMap *pred,
                         const struct CxrLabelMap *target,
                         uint8_t class_code,
                         struct CxrScore *out);

/**
 * Image from `height * width` intensities; values outside `[0, 1]` are rejected.
 *
 * # Safety
 * `data` must point to `height * width` floats.
 */
enum CxrStatus cxr_image_new(size_t height, size_t width, const float *data, struct CxrImage **out);

/**
 * # Safety
 * `image` must come from this library and not be used afterwards.
 */
void cxr_image_free(struct CxrImage *image);

/**
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_image_dims(const struct CxrImage *image, size_t *height, size_t *width);

/**
 * Copies the intensities into `buf` (`height * width` floats).
 *
 * # Safety
 * `buf` must be writable for `len` floats.
 */
enum CxrStatus cxr_image_data(const struct CxrImage *image, float *buf, size_t len);

/**
 * The `index`-th phantom of the generator seeded with `seed` at side `size`.
 *
 * # Safety
 * Output pointers must be writable.
 */
enum CxrStatus cxr_phantom(uint64_t seed,
                           size_t size,
                           size_t index,
                           struct CxrImage **out_image,
                           struct CxrLabelMap **out_labels);

/**
 * Applies one random rigid jitter plus noise, drawn from `seed`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_augment(const struct CxrImage *image,
                           const struct CxrLabelMap *labels,
                           uint64_t seed,
                           struct CxrImage **out_image,
                           struct CxrLabelMap **out_labels);

/**
 * Loads a segmenter checkpoint from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be a valid C string.
 */
enum CxrStatus cxr_segmenter_load(const char *path, struct CxrSegmenter **out);

/**
 * # Safety
 * `seg` must come from this library and not be used afterwards.
 */
void cxr_segmenter_free(struct CxrSegmenter *seg);

/**
 * Sliding-window prediction of a full label map.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CxrStatus cxr_segmenter_predict(const struct CxrSegmenter *seg,
                                     const struct CxrImage *image,
                                     struct CxrLabelMap **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CXRGEN_H */
