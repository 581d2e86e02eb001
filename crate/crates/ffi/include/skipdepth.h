/* skipdepth C API: monocular depth estimation with attention-based skip fusion. */

#ifndef SKIPDEPTH_H
#define SKIPDEPTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every API call.
 */
typedef enum SdStatus {
  SD_OK = 0,
  /*
   A required pointer argument was null.
   */
  SD_NULL_ARGUMENT = 1,
  /*
   File could not be read or written.
   */
  SD_IO_ERROR = 2,
  /*
   File content is malformed (checkpoint, image, depth map).
   */
  SD_FORMAT_ERROR = 3,
  /*
   Buffer extents violate the API contract (e.g. image too small).
   */
  SD_CONTRACT_ERROR = 4,
  /*
   Numerical failure inside the pipeline.
   */
  SD_RUNTIME_ERROR = 5,
} SdStatus;

/*
 Opaque model handle.
 */
typedef struct SdModel SdModel;

/*
 Aggregate depth metrics over one prediction/ground-truth pair.
 */
typedef struct SdMetricReport {
  double abs_rel;
  double sq_rel;
  double rmse;
  double log10;
  double silog;
  double delta1;
  double delta2;
  double delta3;
  uint64_t n_valid;
} SdMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static C string.
 */
const char *sd_version(void);

/*
 Description of the most recent error on this thread; valid until the
 next failing call from the same thread.
 */
const char *sd_last_error_message(void);

/*
 Load a trained checkpoint into a fresh model handle.

 # Safety
 `checkpoint_path` must be a valid NUL-terminated string and `out` a
 valid pointer; on success `*out` owns the model until `sd_model_free`.
 */
enum SdStatus sd_model_load(const char *checkpoint_path, struct SdModel **out);

/*
 Release a handle returned by `sd_model_load`. Null is a no-op.

 # Safety
 `model` must be a pointer from `sd_model_load` that has not been freed.
 */
void sd_model_free(struct SdModel *model);

/*
 Depth range the model was trained for.

 # Safety
 All pointers must be valid.
 */
enum SdStatus sd_model_depth_range(const struct SdModel *model, double *d_min, double *d_max);

/*
 Predict metric depth for an interleaved row-major RGB buffer in [0, 1].
 `depth_out` receives `height * width` values. `flip_average` non-zero
 averages the prediction with the mirrored-image prediction.

 # Safety
 `rgb` must hold `height * width * 3` floats and `depth_out` room for
 `height * width` floats.
 */
enum SdStatus sd_model_infer(const struct SdModel *model,
                             const float *rgb,
                             size_t height,
                             size_t width,
                             int flip_average,
                             float *depth_out);

/*
 Standard depth metrics over masked pixels; predictions are clamped to
 `[d_min, d_max]`. `mask` may be null, meaning every pixel with positive
 ground truth counts.

 # Safety
 `pred` and `gt` must hold `height * width` floats; `mask`, when
 non-null, `height * width` bytes; `out` must be a valid pointer.
 */
enum SdStatus sd_metrics(const float *pred,
                         const float *gt,
                         const uint8_t *mask,
                         size_t height,
                         size_t width,
                         double d_min,
                         double d_max,
                         struct SdMetricReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKIPDEPTH_H */
