#ifndef ASEG_H
#define ASEG_H

#include <stddef.h>
#include <stdint.h>

typedef enum AsegStatus {
  ASEG_STATUS_OK = 0,
  ASEG_STATUS_NULL_POINTER = 1,
  ASEG_STATUS_INVALID_ARGUMENT = 2,
  ASEG_STATUS_CONFIG = 3,
  ASEG_STATUS_DATA = 4,
  ASEG_STATUS_NUMERICAL = 5,
  ASEG_STATUS_IO = 6,
  ASEG_STATUS_PANIC = 7,
} AsegStatus;

// A segmentation network ready for inference.
typedef struct AsegGenerator AsegGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer stays valid
// until the next `aseg_*` call on this thread.
const char *aseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *aseg_version(void);

// Loads a generator checkpoint. `config_path` names the training config that describes
// the architecture; pass null for the defaults.
//
// # Safety
// Path arguments must be NUL-terminated strings (or null where allowed); `out` must be writable.
enum AsegStatus aseg_generator_load(const char *checkpoint_path,
                                    const char *config_path,
                                    struct AsegGenerator **out);

// A freshly initialized generator (untrained), deterministic in `seed`.
//
// # Safety
// `config_path` must be null or a NUL-terminated string; `out` must be writable.
enum AsegStatus aseg_generator_new(const char *config_path,
                                   uint64_t seed,
                                   struct AsegGenerator **out);

// Releases a generator. Null is ignored.
//
// # Safety
// `g` must come from this library and not be used afterwards.
void aseg_generator_free(struct AsegGenerator *g);

// # Safety
// `g` must be a live handle and `out` writable.
enum AsegStatus aseg_generator_param_count(const struct AsegGenerator *g, size_t *out);

// Segments one `height`×`width` slice (row-major) into `labels_out` (same size,
// values 0..=3). The slice is center-cropped or padded to `crop` before inference and
// pixels outside that window are background.
//
// # Safety
// `image` must hold `height*width` floats and `labels_out` room for as many bytes.
enum AsegStatus aseg_generator_predict_slice(const struct AsegGenerator *g,
                                             const float *image,
                                             size_t height,
                                             size_t width,
                                             size_t crop,
                                             uint8_t *labels_out);

// Target slice index for source slice `i` of `m` when the target has `n` slices.
//
// # Safety
// `out` must be writable.
enum AsegStatus aseg_map_slice_index(size_t i, size_t m, size_t n, size_t *out);

// Dice of `class` between two label maps of `len` bytes. Both empty gives 1.
//
// # Safety
// `pred` and `reference` must hold `len` bytes; `out` must be writable.
enum AsegStatus aseg_dice(const uint8_t *pred,
                          const uint8_t *reference,
                          size_t len,
                          uint8_t class_,
                          double *out);

// Jaccard index of `class`; both empty gives 1.
//
// # Safety
// As for [`aseg_dice`].
enum AsegStatus aseg_jaccard(const uint8_t *pred,
                             const uint8_t *reference,
                             size_t len,
                             uint8_t class_,
                             double *out);

// Hausdorff and average surface distance (mm) of `class` over a stack of `slices`
// label planes. `sentinel_used` is set to 1 when one side has no boundary and the
// image diagonal stands in for the distance.
//
// # Safety
// Label buffers must hold `slices*height*width` bytes; outputs must be writable.
enum AsegStatus aseg_surface_distances(const uint8_t *pred,
                                       const uint8_t *reference,
                                       size_t slices,
                                       size_t height,
                                       size_t width,
                                       double spacing_row_mm,
                                       double spacing_col_mm,
                                       uint8_t class_,
                                       double *hausdorff_out,
                                       double *asd_out,
                                       int32_t *sentinel_used);

// Z-score normalizes `len` floats in place. `constant_out` (optional) is set to 1 when
// the input had no spread and was mapped to zeros.
//
// # Safety
// `data` must hold `len` writable floats; `constant_out` may be null.
enum AsegStatus aseg_zscore(float *data, size_t len, int32_t *constant_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASEG_H */
