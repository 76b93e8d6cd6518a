#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segloo/nn.hpp"
#include "segloo/segmentation.hpp"
#include "segloo/tensor.hpp"

namespace segloo::attr {

enum class TapMode { kPredictedClass, kOutputLayer, kMultiLayer };

/// Tap selection request, e.g. "1d", "output", "multilayer:per_layer=50,last_layers=8,seed=7".
struct TapSpec {
  TapMode mode = TapMode::kPredictedClass;
  int per_layer_count = 200;
  int last_n_layers = 20;
  std::uint64_t seed = 0;

  static TapSpec parse(const std::string& text);
  std::string to_string() const;
  friend bool operator==(const TapSpec&, const TapSpec&) = default;
};

struct TapEntry {
  int layer = 0;
  std::uint32_t index = 0;
  friend bool operator==(const TapEntry&, const TapEntry&) = default;
};

/// Monitored nodes. The 1-D and output modes read softmax probabilities; multi-layer
/// entries read layer outputs (post-activation, probabilities for a softmax-terminated net).
struct TapSet {
  TapSpec spec;
  std::vector<TapEntry> entries;  // multi-layer only
  int class_count = 0;

  std::size_t dimension() const;
  // Distinct layer ids referenced by entries, ascending.
  std::vector<int> layers() const;
  friend bool operator==(const TapSet&, const TapSet&) = default;
};

TapSet select_taps(const nn::Network& net, const TapSpec& spec);

/// Counts single-image forward passes; safe to share between threads.
struct PassCounter {
  std::atomic<std::uint64_t> passes{0};
  void add(std::uint64_t n) { passes.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const { return passes.load(std::memory_order_relaxed); }
};

/// Copy of `image` with every channel set to 0 on the pixels of one segment.
Tensor occlude(const Tensor& image, const seg::LabelMap& map, std::uint32_t segment_id);

/// k x d attribution values, row-major by occlusion.
struct AttributionMatrix {
  std::size_t image_id = 0;
  std::size_t occlusions = 0;
  std::size_t taps = 0;
  std::vector<float> values;

  float at(std::size_t occlusion, std::size_t tap) const { return values[occlusion * taps + tap]; }
  std::size_t byte_size() const { return values.size() * sizeof(float); }
};

struct LooOptions {
  // Occluded images forwarded per network call; results do not depend on it.
  int chunk = 32;
  PassCounter* counter = nullptr;
};

/// Leave-one-out attributions for one image against one or more tap sets, sharing the
/// k+1 forward passes between them.
std::vector<AttributionMatrix> loo_attributions(const nn::Network& net, const Tensor& image,
                                                const seg::LabelMap& map, std::span<const TapSet> taps,
                                                const LooOptions& options = {});
AttributionMatrix loo_attributions(const nn::Network& net, const Tensor& image, const seg::LabelMap& map,
                                   const TapSet& taps, const LooOptions& options = {});

/// Smallest value v with (count of values <= v) / N >= p.
float empirical_quantile(std::span<const float> values, double p);
float iqr(std::span<const float> values);
std::vector<float> iqr_vector(const AttributionMatrix& m);

struct Provenance {
  std::string segmentation;
  std::string taps;
  std::uint64_t seed = 0;
  std::string weights_checksum;

  std::string to_json() const;
  static Provenance from_json(const std::string& text);
};

struct IqrVector {
  std::size_t image_id = 0;
  std::vector<float> values;
};

struct ExtractOptions {
  int workers = 1;
  int chunk = 32;
  bool retain_matrices = false;
  PassCounter* counter = nullptr;
};

struct ExtractResult {
  // vectors[t][i]: tap set t, image i.
  std::vector<std::vector<IqrVector>> vectors;
  // Same layout, filled only with retain_matrices.
  std::vector<std::vector<AttributionMatrix>> matrices;
  std::vector<int> segment_counts;
  // Bytes of attribution values produced, summed over images and tap sets.
  std::uint64_t attribution_bytes = 0;
};

/// IQR features for every image of an N x C x H x W batch. Label maps are computed with
/// `segmentation` unless supplied (one per image).
ExtractResult extract_features(const nn::Network& net, const Tensor& batch, const seg::SegmentationSpec& segmentation,
                               std::span<const TapSet> taps, const ExtractOptions& options = {},
                               std::span<const seg::LabelMap> maps = {});

}  // namespace segloo::attr
