/* segloo C interface.
 *
 * Every call returns a segloo_status; on failure segloo_last_error() describes the problem
 * (thread-local, valid until the next failing call on the same thread). Strings returned
 * through char** are allocated by the library and released with segloo_free_string.
 */
#ifndef SEGLOO_SEGLOO_H
#define SEGLOO_SEGLOO_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SEGLOO_API __declspec(dllexport)
#else
#define SEGLOO_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum segloo_status {
  SEGLOO_OK = 0,
  SEGLOO_ERR_CONFIG = 2,   /* bad arguments or configuration */
  SEGLOO_ERR_DATA = 3,     /* missing, malformed or mismatched input data */
  SEGLOO_ERR_NUMERIC = 4,  /* non-finite values, failed numeric preconditions */
  SEGLOO_ERR_IO = 5,       /* filesystem failure */
  SEGLOO_ERR_FORMAT = 6,   /* unknown magic or version in a binary file */
  SEGLOO_ERR_INTERNAL = 7  /* unexpected failure */
} segloo_status;

typedef struct segloo_network segloo_network;
typedef struct segloo_detector segloo_detector;

/* Receives progress lines from long-running stages. */
typedef void (*segloo_log_fn)(const char* line, void* user);

SEGLOO_API const char* segloo_version(void);
SEGLOO_API const char* segloo_last_error(void);
SEGLOO_API const char* segloo_status_name(segloo_status status);
SEGLOO_API void segloo_free_string(char* s);

/* Pipeline stages: "synth-data", "train-model", "attack", "segment", "extract",
 * "train-detector", "evaluate", "bench", "report". config_json is a JSON object of options
 * (missing keys take defaults, unknown keys are rejected); the stage summary is returned as JSON. */
SEGLOO_API segloo_status segloo_stage_defaults(const char* stage, char** defaults_json);
SEGLOO_API segloo_status segloo_run_stage(const char* stage, const char* config_json, segloo_log_fn log, void* user,
                                          char** result_json);

/* Networks. Images are C x H x W floats in [0, 1], images laid out back to back. */
SEGLOO_API segloo_status segloo_network_load(const char* arch_path, const char* weights_path, segloo_network** out);
SEGLOO_API void segloo_network_free(segloo_network* net);
SEGLOO_API size_t segloo_network_input_size(const segloo_network* net);
SEGLOO_API int segloo_network_class_count(const segloo_network* net);
/* probs receives count x class_count softmax probabilities. */
SEGLOO_API segloo_status segloo_network_predict(const segloo_network* net, const float* images, size_t count, float* probs);

/* Segments one 3 x height x width image; labels receives height*width segment ids. */
SEGLOO_API segloo_status segloo_segment(const char* spec, const float* image, int height, int width, uint32_t* labels,
                                        int* segment_count);

/* IQR attribution features of one image. capacity is the length of features; dimension
 * receives the feature count (also on SEGLOO_ERR_CONFIG when capacity is too small). */
SEGLOO_API segloo_status segloo_iqr_features(const segloo_network* net, const float* image, const char* segmentation,
                                             const char* mode, float* features, size_t capacity, size_t* dimension,
                                             uint64_t* forward_passes);

/* Accounted attribution storage: sum of segment_counts[i] * dimension * 4 bytes. */
SEGLOO_API uint64_t segloo_attribution_bytes(const int* segment_counts, size_t count, size_t dimension);

/* Detectors written by the train-detector stage. */
SEGLOO_API segloo_status segloo_detector_load(const char* path, segloo_detector** out);
SEGLOO_API void segloo_detector_free(segloo_detector* detector);
SEGLOO_API size_t segloo_detector_dimension(const segloo_detector* detector);
/* Margin score; positive reads as adversarial. */
SEGLOO_API segloo_status segloo_detector_score(const segloo_detector* detector, const float* features, size_t dimension,
                                               double* score);

#ifdef __cplusplus
}
#endif

#endif /* SEGLOO_SEGLOO_H */
