/* Exercises the C interface from C: stages, handles, status codes and error text. */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

#include "segloo/segloo.h"

static int failures = 0;

#define EXPECT(cond)                                                 \
  do {                                                               \
    if (!(cond)) {                                                   \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                    \
    }                                                                \
  } while (0)

static int log_lines = 0;
static void on_log(const char* line, void* user) {
  (void)line;
  ++*(int*)user;
}

/* Runs a stage; fmt takes `dir` for every %s. The first "features_..." file named in the
 * summary is copied to `features` when given. */
static segloo_status stage_capture(const char* name, const char* fmt, const char* dir, char* features, size_t cap) {
  char config[4096];
  char* result = NULL;
  snprintf(config, sizeof config, fmt, dir, dir, dir, dir);
  segloo_status st = segloo_run_stage(name, config, on_log, &log_lines, &result);
  if (st != SEGLOO_OK) fprintf(stderr, "%s: %s\n", name, segloo_last_error());
  if (features && result) {
    const char* f = strstr(result, "features_");
    size_t n = 0;
    while (f && f[n] && f[n] != '"' && n + 1 < cap) ++n;
    if (f) memcpy(features, f, n);
    features[n] = 0;
  }
  segloo_free_string(result);
  return st;
}

static segloo_status stage(const char* name, const char* fmt, const char* dir) {
  return stage_capture(name, fmt, dir, NULL, 0);
}

int main(void) {
  char dir[256], path[1024], other[1024], features[512] = "";
  snprintf(dir, sizeof dir, "%s/segloo_capi_%ld", getenv("TMPDIR") ? getenv("TMPDIR") : "/tmp", (long)getpid());

  EXPECT(strcmp(segloo_version(), "0.1.0") == 0);
  EXPECT(strcmp(segloo_status_name(SEGLOO_ERR_DATA), "data error") == 0);

  char* defaults = NULL;
  EXPECT(segloo_stage_defaults("bench", &defaults) == SEGLOO_OK);
  EXPECT(defaults && strstr(defaults, "\"repeats\""));
  segloo_free_string(defaults);
  EXPECT(segloo_stage_defaults("nope", &defaults) == SEGLOO_ERR_CONFIG);
  EXPECT(strstr(segloo_last_error(), "unknown stage") != NULL);

  char* result = NULL;
  EXPECT(segloo_run_stage("bench", "{not json", NULL, NULL, &result) == SEGLOO_ERR_CONFIG);
  EXPECT(result == NULL);
  EXPECT(segloo_run_stage("bench", "{\"bogus\": 1}", NULL, NULL, &result) == SEGLOO_ERR_CONFIG);
  EXPECT(strstr(segloo_last_error(), "bogus") != NULL);

  EXPECT(stage("synth-data", "{\"out\": \"%s/data\", \"train_per_file\": 40, \"train_files\": 1, \"test_records\": 40}",
               dir) == SEGLOO_OK);
  EXPECT(stage("train-model", "{\"out\": \"%s/model\", \"data\": \"%s/data\", \"epochs\": 1}", dir) == SEGLOO_OK);
  EXPECT(log_lines > 0);

  segloo_network* net = NULL;
  snprintf(path, sizeof path, "%s/model/arch.json", dir);
  snprintf(other, sizeof other, "%s/model/missing.sfw", dir);
  EXPECT(segloo_network_load(path, other, &net) != SEGLOO_OK);
  EXPECT(net == NULL);
  EXPECT(strlen(segloo_last_error()) > 0);
  snprintf(other, sizeof other, "%s/model/weights.sfw", dir);
  EXPECT(segloo_network_load(path, other, &net) == SEGLOO_OK);
  EXPECT(net != NULL);
  EXPECT(segloo_network_input_size(net) == 3072);
  EXPECT(segloo_network_class_count(net) == 10);

  float* images = malloc(2 * 3072 * sizeof(float));
  for (int i = 0; i < 2 * 3072; ++i) images[i] = (float)((i * 37) % 101) / 100.0f;
  float probs[20];
  EXPECT(segloo_network_predict(net, images, 2, probs) == SEGLOO_OK);
  double total = 0.0;
  for (int c = 0; c < 10; ++c) total += probs[c];
  EXPECT(fabs(total - 1.0) < 1e-5);

  uint32_t labels[1024];
  int segments = 0;
  EXPECT(segloo_segment("slic:n_segments=32", images, 32, 32, labels, &segments) == SEGLOO_OK);
  EXPECT(segments >= 1 && segments <= 32);
  EXPECT(segloo_segment("voronoi", images, 32, 32, labels, &segments) == SEGLOO_ERR_CONFIG);

  float feats[16];
  size_t dim = 0;
  uint64_t passes = 0;
  EXPECT(segloo_iqr_features(net, images, "per-pixel", "1d", feats, 16, &dim, &passes) == SEGLOO_OK);
  EXPECT(dim == 1);
  EXPECT(passes == 1025);
  EXPECT(segloo_iqr_features(net, images, "slic:n_segments=32", "output", feats, 4, &dim, &passes) == SEGLOO_ERR_CONFIG);
  EXPECT(dim == 10);
  EXPECT(segloo_iqr_features(net, images, "slic:n_segments=32", "output", feats, 16, &dim, &passes) == SEGLOO_OK);
  EXPECT(passes <= 33);

  int counts[128];
  for (int i = 0; i < 128; ++i) counts[i] = 1024;
  EXPECT(segloo_attribution_bytes(counts, 128, 1) == 524288u);
  EXPECT(segloo_attribution_bytes(counts, 128, 3810) == 128ull * 1024 * 3810 * 4);

  EXPECT(stage("attack",
               "{\"out\": \"%s/attack\", \"model\": \"%s/model\", \"data\": \"%s/data\", \"attacks\": [\"fgsm:eps=0.1\"],"
               " \"batch_count\": 1, \"batch_size\": 8, \"correct_only\": false}",
               dir) == SEGLOO_OK);
  EXPECT(stage_capture("extract",
                       "{\"out\": \"%s/feat\", \"model\": \"%s/model\", \"input\": \"%s/attack\","
                       " \"segmentations\": [\"slic:n_segments=8\"], \"modes\": [\"output\"]}",
                       dir, features, sizeof features) == SEGLOO_OK);
  EXPECT(strstr(features, ".csv") != NULL);
  snprintf(path, sizeof path, "{\"out\": \"%s/det\", \"features\": \"%s/feat/%s\", \"trees\": 3}", dir, dir,
           features);
  EXPECT(segloo_run_stage("train-detector", path, NULL, NULL, &result) == SEGLOO_OK);
  if (result == NULL) fprintf(stderr, "train-detector: %s\n", segloo_last_error());
  segloo_free_string(result);

  segloo_detector* det = NULL;
  snprintf(path, sizeof path, "%s/det/detector.json", dir);
  EXPECT(segloo_detector_load(path, &det) == SEGLOO_OK);
  EXPECT(segloo_detector_dimension(det) == 10);
  double score = NAN;
  EXPECT(segloo_detector_score(det, feats, 10, &score) == SEGLOO_OK);
  EXPECT(isfinite(score));
  EXPECT(segloo_detector_score(det, feats, 9, &score) == SEGLOO_ERR_CONFIG);
  snprintf(path, sizeof path, "%s/det/train.csv", dir);
  segloo_detector* bad = NULL;
  EXPECT(segloo_detector_load(path, &bad) != SEGLOO_OK);
  EXPECT(bad == NULL);

  EXPECT(stage("extract", "{\"out\": \"%s/feat2\", \"model\": \"%s/nowhere\", \"input\": \"%s/attack\"}", dir) ==
         SEGLOO_ERR_DATA);
  EXPECT(strstr(segloo_last_error(), "missing input") != NULL);

  segloo_detector_free(det);
  segloo_network_free(net);
  free(images);
  snprintf(path, sizeof path, "rm -rf '%s'", dir);
  if (system(path) != 0) fprintf(stderr, "could not remove %s\n", dir);
  if (failures) fprintf(stderr, "%d expectation(s) failed\n", failures);
  return failures ? 1 : 0;
}
