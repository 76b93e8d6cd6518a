#include <cstring>
#include <new>
#include <string>

#include "segloo/attribution.hpp"
#include "segloo/detector.hpp"
#include "segloo/error.hpp"
#include "segloo/pipeline.hpp"
#include "segloo/segloo.h"

struct segloo_network {
  segloo::nn::Network net;
};

struct segloo_detector {
  segloo::det::Detector det;
};

namespace {

thread_local std::string last_error;

segloo_status status_of(segloo::ErrorKind k) {
  using segloo::ErrorKind;
  switch (k) {
    case ErrorKind::kConfig: return SEGLOO_ERR_CONFIG;
    case ErrorKind::kData: return SEGLOO_ERR_DATA;
    case ErrorKind::kNumeric: return SEGLOO_ERR_NUMERIC;
    case ErrorKind::kIo: return SEGLOO_ERR_IO;
    case ErrorKind::kFormat: return SEGLOO_ERR_FORMAT;
  }
  return SEGLOO_ERR_INTERNAL;
}

template <class F>
segloo_status guarded(F&& f) {
  try {
    f();
    return SEGLOO_OK;
  } catch (const segloo::Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const nlohmann::json::exception& e) {
    last_error = std::string("invalid JSON: ") + e.what();
    return SEGLOO_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return SEGLOO_ERR_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return SEGLOO_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown failure";
    return SEGLOO_ERR_INTERNAL;
  }
}

void need(bool ok, const char* what) { segloo::require(ok, segloo::ErrorKind::kConfig, what); }

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

}  // namespace

extern "C" {

const char* segloo_version(void) { return "0.1.0"; }

const char* segloo_last_error(void) { return last_error.c_str(); }

const char* segloo_status_name(segloo_status status) {
  switch (status) {
    case SEGLOO_OK: return "ok";
    case SEGLOO_ERR_CONFIG: return "config error";
    case SEGLOO_ERR_DATA: return "data error";
    case SEGLOO_ERR_NUMERIC: return "numeric failure";
    case SEGLOO_ERR_IO: return "io error";
    case SEGLOO_ERR_FORMAT: return "format error";
    case SEGLOO_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void segloo_free_string(char* s) { std::free(s); }

segloo_status segloo_stage_defaults(const char* stage, char** defaults_json) {
  return guarded([&] {
    need(stage && defaults_json, "segloo_stage_defaults: null argument");
    *defaults_json = dup(segloo::pipeline::stage_defaults(stage).dump(2));
  });
}

segloo_status segloo_run_stage(const char* stage, const char* config_json, segloo_log_fn log, void* user,
                               char** result_json) {
  return guarded([&] {
    need(stage && result_json, "segloo_run_stage: null argument");
    *result_json = nullptr;
    const auto config = config_json && *config_json ? nlohmann::json::parse(config_json) : nlohmann::json::object();
    segloo::pipeline::Logger logger;
    if (log) logger = [&](const std::string& line) { log(line.c_str(), user); };
    *result_json = dup(segloo::pipeline::run_stage(stage, config, logger).dump(2));
  });
}

segloo_status segloo_network_load(const char* arch_path, const char* weights_path, segloo_network** out) {
  return guarded([&] {
    need(arch_path && weights_path && out, "segloo_network_load: null argument");
    *out = nullptr;
    const auto arch = segloo::nn::ArchConfig::load(arch_path);
    *out = new segloo_network{segloo::nn::load_weights(weights_path, arch)};
  });
}

void segloo_network_free(segloo_network* net) { delete net; }

size_t segloo_network_input_size(const segloo_network* net) {
  return net ? segloo::shape_size(net->net.input_shape()) : 0;
}

int segloo_network_class_count(const segloo_network* net) { return net ? net->net.class_count() : 0; }

segloo_status segloo_network_predict(const segloo_network* net, const float* images, size_t count, float* probs) {
  return guarded([&] {
    need(net && images && probs, "segloo_network_predict: null argument");
    need(count > 0, "segloo_network_predict: no images");
    segloo::Shape s{static_cast<int>(count)};
    for (int d : net->net.input_shape()) s.push_back(d);
    segloo::Tensor batch(s, std::vector<float>(images, images + count * segloo::shape_size(net->net.input_shape())));
    const auto res = net->net.forward(batch);
    std::memcpy(probs, res.probs.data(), res.probs.size() * sizeof(float));
  });
}

segloo_status segloo_segment(const char* spec, const float* image, int height, int width, uint32_t* labels,
                             int* segment_count) {
  return guarded([&] {
    need(spec && image && labels && segment_count, "segloo_segment: null argument");
    need(height > 0 && width > 0, "segloo_segment: image must have pixels");
    const std::size_t n = static_cast<std::size_t>(height) * width;
    segloo::Tensor img({3, height, width}, std::vector<float>(image, image + 3 * n));
    const auto map = segloo::seg::segment(img, segloo::seg::SegmentationSpec::parse(spec));
    std::memcpy(labels, map.labels.data(), n * sizeof(std::uint32_t));
    *segment_count = map.segment_count;
  });
}

segloo_status segloo_iqr_features(const segloo_network* net, const float* image, const char* segmentation,
                                  const char* mode, float* features, size_t capacity, size_t* dimension,
                                  uint64_t* forward_passes) {
  return guarded([&] {
    need(net && image && segmentation && mode && dimension, "segloo_iqr_features: null argument");
    const auto taps = segloo::attr::select_taps(net->net, segloo::attr::TapSpec::parse(mode));
    *dimension = taps.dimension();
    need(features && capacity >= taps.dimension(), "segloo_iqr_features: feature buffer too small");
    segloo::Shape s{1};
    for (int d : net->net.input_shape()) s.push_back(d);
    segloo::Tensor batch(s, std::vector<float>(image, image + segloo::shape_size(net->net.input_shape())));
    segloo::attr::PassCounter counter;
    segloo::attr::ExtractOptions o;
    o.counter = &counter;
    const auto res = segloo::attr::extract_features(net->net, batch, segloo::seg::SegmentationSpec::parse(segmentation),
                                                    std::span<const segloo::attr::TapSet>(&taps, 1), o);
    const auto& v = res.vectors[0][0].values;
    std::memcpy(features, v.data(), v.size() * sizeof(float));
    if (forward_passes) *forward_passes = counter.value();
  });
}

uint64_t segloo_attribution_bytes(const int* segment_counts, size_t count, size_t dimension) {
  if (!segment_counts) return 0;
  return segloo::pipeline::attribution_bytes(std::span<const int>(segment_counts, count), dimension);
}

segloo_status segloo_detector_load(const char* path, segloo_detector** out) {
  return guarded([&] {
    need(path && out, "segloo_detector_load: null argument");
    *out = nullptr;
    *out = new segloo_detector{segloo::det::Detector::load(path)};
  });
}

void segloo_detector_free(segloo_detector* detector) { delete detector; }

size_t segloo_detector_dimension(const segloo_detector* detector) { return detector ? detector->det.dimension() : 0; }

segloo_status segloo_detector_score(const segloo_detector* detector, const float* features, size_t dimension,
                                    double* score) {
  return guarded([&] {
    need(detector && features && score, "segloo_detector_score: null argument");
    need(dimension == detector->det.dimension(), "segloo_detector_score: feature dimension does not match the detector");
    *score = detector->det.score(std::span<const float>(features, dimension));
  });
}

}  // extern "C"
