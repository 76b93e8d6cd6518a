#include "segloo/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "internal/params.hpp"
#include "internal/rng.hpp"
#include "segloo/error.hpp"

namespace segloo::attr {

// ---------------------------------------------------------------------------
// Tap selection

TapSpec TapSpec::parse(const std::string& text) {
  const auto [name, kv] = detail::parse_cell(text);
  TapSpec spec;
  if (name == "1d" || name == "1D" || name == "predicted") {
    spec.mode = TapMode::kPredictedClass;
  } else if (name == "output" || name == "10d" || name == "output-layer") {
    spec.mode = TapMode::kOutputLayer;
  } else if (name == "multilayer" || name == "multi-layer" || name == "ml") {
    spec.mode = TapMode::kMultiLayer;
  } else {
    fail(ErrorKind::kConfig, "unknown tap mode '" + name + "'");
  }
  for (const auto& [k, v] : kv) {
    require(spec.mode == TapMode::kMultiLayer, ErrorKind::kConfig, "tap mode " + name + " takes no parameters");
    if (k == "per_layer") spec.per_layer_count = static_cast<int>(detail::to_integer(k, v));
    else if (k == "last_layers") spec.last_n_layers = static_cast<int>(detail::to_integer(k, v));
    else if (k == "seed") spec.seed = static_cast<std::uint64_t>(detail::to_integer(k, v));
    else fail(ErrorKind::kConfig, "unknown tap parameter '" + k + "'");
  }
  return spec;
}

std::string TapSpec::to_string() const {
  switch (mode) {
    case TapMode::kPredictedClass: return "1d";
    case TapMode::kOutputLayer: return "output";
    case TapMode::kMultiLayer:
      return "multilayer:per_layer=" + std::to_string(per_layer_count) + ",last_layers=" +
             std::to_string(last_n_layers) + ",seed=" + std::to_string(seed);
  }
  return {};
}

std::size_t TapSet::dimension() const {
  switch (spec.mode) {
    case TapMode::kPredictedClass: return 1;
    case TapMode::kOutputLayer: return static_cast<std::size_t>(class_count);
    case TapMode::kMultiLayer: return entries.size();
  }
  return 0;
}

std::vector<int> TapSet::layers() const {
  std::vector<int> out;
  for (const auto& e : entries) out.push_back(e.layer);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

TapSet select_taps(const nn::Network& net, const TapSpec& spec) {
  TapSet set;
  set.spec = spec;
  set.class_count = net.class_count();
  if (spec.mode != TapMode::kMultiLayer) return set;

  require(spec.per_layer_count >= 1, ErrorKind::kConfig, "per_layer must be at least 1");
  // Flatten only re-indexes the previous layer's nodes, so it is not a separate layer here.
  std::vector<int> candidates;
  for (std::size_t l = 0; l < net.tap_layer_count(); ++l) {
    if (net.arch().layers[l].kind != nn::LayerKind::kFlatten) candidates.push_back(static_cast<int>(l));
  }
  require(spec.last_n_layers >= 1 && static_cast<std::size_t>(spec.last_n_layers) <= candidates.size(),
          ErrorKind::kConfig,
          "last_layers must be in [1, " + std::to_string(candidates.size()) + "], got " +
              std::to_string(spec.last_n_layers));

  detail::Rng rng(spec.seed);
  std::vector<std::uint32_t> pool;
  for (auto it = candidates.end() - spec.last_n_layers; it != candidates.end(); ++it) {
    const int layer = *it;
    const auto nodes = static_cast<std::uint32_t>(net.layer_node_count(layer));
    pool.resize(nodes);
    std::iota(pool.begin(), pool.end(), 0u);
    const std::uint32_t take = std::min<std::uint32_t>(nodes, static_cast<std::uint32_t>(spec.per_layer_count));
    if (take < nodes) {
      // partial Fisher-Yates
      for (std::uint32_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(nodes - i)]);
    }
    std::sort(pool.begin(), pool.begin() + take);
    for (std::uint32_t i = 0; i < take; ++i) set.entries.push_back({layer, pool[i]});
  }
  return set;
}

// ---------------------------------------------------------------------------
// Occlusion

namespace {

struct ImageView {
  int channels, height, width;
};

ImageView view_of(const Tensor& image) {
  const bool batched = image.rank() == 4 && image.dim(0) == 1;
  require(image.rank() == 3 || batched, ErrorKind::kConfig,
          "expected a C x H x W image, got " + shape_string(image.shape()));
  const std::size_t o = batched ? 1 : 0;
  return {image.dim(o), image.dim(o + 1), image.dim(o + 2)};
}

void check_map(const ImageView& v, const seg::LabelMap& map) {
  require(map.height == v.height && map.width == v.width, ErrorKind::kConfig,
          "label map is " + std::to_string(map.height) + "x" + std::to_string(map.width) + " but image is " +
              std::to_string(v.height) + "x" + std::to_string(v.width));
  map.validate();
}

}  // namespace

Tensor occlude(const Tensor& image, const seg::LabelMap& map, std::uint32_t segment_id) {
  const auto v = view_of(image);
  check_map(v, map);
  require(segment_id < static_cast<std::uint32_t>(map.segment_count), ErrorKind::kConfig,
          "segment id " + std::to_string(segment_id) + " out of range (" + std::to_string(map.segment_count) +
              " segments)");
  Tensor out = image;
  const std::size_t plane = static_cast<std::size_t>(v.height) * v.width;
  for (std::size_t p = 0; p < plane; ++p) {
    if (map.labels[p] != segment_id) continue;
    for (int c = 0; c < v.channels; ++c) out[c * plane + p] = 0.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Leave-one-out attributions

namespace {

// Reads the tapped values of image b of a forward result into `out`.
void read_taps(const nn::ForwardResult& r, std::size_t b, const TapSet& set, int predicted,
               const std::vector<int>& trace_layers, float* out) {
  switch (set.spec.mode) {
    case TapMode::kPredictedClass:
      out[0] = r.probs.item(b)[predicted];
      return;
    case TapMode::kOutputLayer: {
      const auto row = r.probs.item(b);
      std::copy(row.begin(), row.end(), out);
      return;
    }
    case TapMode::kMultiLayer: {
      std::span<const float> values;
      int current = -1;
      for (std::size_t j = 0; j < set.entries.size(); ++j) {
        const auto& e = set.entries[j];
        if (e.layer != current) {
          const auto slot = std::lower_bound(trace_layers.begin(), trace_layers.end(), e.layer) - trace_layers.begin();
          values = r.trace.values[slot].item(b);
          current = e.layer;
        }
        out[j] = values[e.index];
      }
      return;
    }
  }
}

}  // namespace

std::vector<AttributionMatrix> loo_attributions(const nn::Network& net, const Tensor& image,
                                                const seg::LabelMap& map, std::span<const TapSet> taps,
                                                const LooOptions& options) {
  const auto v = view_of(image);
  check_map(v, map);
  require(options.chunk >= 1, ErrorKind::kConfig, "occlusion chunk must be at least 1");

  std::vector<int> layers;
  for (const auto& t : taps) {
    require(t.class_count == net.class_count(), ErrorKind::kConfig, "tap set was selected for a different network");
    for (const auto& e : t.entries) {
      require(e.layer >= 0 && static_cast<std::size_t>(e.layer) < net.tap_layer_count() &&
                  e.index < net.layer_node_count(e.layer),
              ErrorKind::kConfig, "tap entry out of range for this network");
    }
    const auto l = t.layers();
    layers.insert(layers.end(), l.begin(), l.end());
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

  const Shape one{1, v.channels, v.height, v.width};
  const Tensor x = image.reshaped(one);
  const auto base = net.forward(x, layers);
  if (options.counter) options.counter->add(1);
  const int predicted = nn::argmax(base.probs.item(0));

  const std::size_t k = static_cast<std::size_t>(map.segment_count);
  std::vector<AttributionMatrix> out(taps.size());
  std::vector<std::vector<float>> base_values(taps.size());
  for (std::size_t t = 0; t < taps.size(); ++t) {
    out[t].occlusions = k;
    out[t].taps = taps[t].dimension();
    out[t].values.assign(k * out[t].taps, 0.0f);
    base_values[t].resize(out[t].taps);
    read_taps(base, 0, taps[t], predicted, layers, base_values[t].data());
  }

  // Pixels of each segment, so every occluded copy costs O(segment size).
  const std::size_t plane = static_cast<std::size_t>(v.height) * v.width;
  std::vector<std::size_t> start(k + 1, 0);
  for (auto l : map.labels) ++start[l + 1];
  std::partial_sum(start.begin(), start.end(), start.begin());
  std::vector<std::uint32_t> pixels(plane);
  {
    auto fill = start;
    for (std::size_t p = 0; p < plane; ++p) pixels[fill[map.labels[p]]++] = static_cast<std::uint32_t>(p);
  }

  const std::size_t item = x.size();
  std::vector<float> row;
  for (std::size_t first = 0; first < k; first += options.chunk) {
    const std::size_t m = std::min<std::size_t>(options.chunk, k - first);
    Tensor batch({static_cast<int>(m), v.channels, v.height, v.width});
    for (std::size_t i = 0; i < m; ++i) {
      float* dst = batch.data() + i * item;
      std::copy(x.data(), x.data() + item, dst);
      const std::size_t s = first + i;
      for (std::size_t q = start[s]; q < start[s + 1]; ++q) {
        for (int c = 0; c < v.channels; ++c) dst[c * plane + pixels[q]] = 0.0f;
      }
    }
    const auto r = net.forward(batch, layers);
    if (options.counter) options.counter->add(m);
    for (std::size_t t = 0; t < taps.size(); ++t) {
      const std::size_t d = out[t].taps;
      row.resize(d);
      for (std::size_t i = 0; i < m; ++i) {
        read_taps(r, i, taps[t], predicted, layers, row.data());
        float* dst = out[t].values.data() + (first + i) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] = std::fabs(row[j] - base_values[t][j]);
      }
    }
  }
  return out;
}

AttributionMatrix loo_attributions(const nn::Network& net, const Tensor& image, const seg::LabelMap& map,
                                   const TapSet& taps, const LooOptions& options) {
  return std::move(loo_attributions(net, image, map, std::span<const TapSet>(&taps, 1), options).front());
}

// ---------------------------------------------------------------------------
// Quantiles

namespace {

// 0-based sorted position of the empirical p-quantile among n values.
std::size_t quantile_rank(std::size_t n, double p) {
  require(p >= 0.0 && p <= 1.0, ErrorKind::kConfig, "quantile level must be in [0, 1]");
  const double dn = static_cast<double>(n);
  std::size_t i = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(p * dn)), 1, n);
  while (i > 1 && static_cast<double>(i - 1) / dn >= p) --i;
  while (i < n && static_cast<double>(i) / dn < p) ++i;
  return i - 1;
}

// Q(0.75) - Q(0.25) of a scratch buffer, which is reordered.
float iqr_inplace(std::vector<float>& buf) {
  const std::size_t lo = quantile_rank(buf.size(), 0.25), hi = quantile_rank(buf.size(), 0.75);
  std::nth_element(buf.begin(), buf.begin() + hi, buf.end());
  const float upper = buf[hi];
  std::nth_element(buf.begin(), buf.begin() + lo, buf.begin() + hi + 1);
  return upper - buf[lo];
}

}  // namespace

float empirical_quantile(std::span<const float> values, double p) {
  require(!values.empty(), ErrorKind::kData, "quantile of an empty list");
  std::vector<float> buf(values.begin(), values.end());
  const std::size_t r = quantile_rank(buf.size(), p);
  std::nth_element(buf.begin(), buf.begin() + r, buf.end());
  return buf[r];
}

float iqr(std::span<const float> values) {
  require(!values.empty(), ErrorKind::kData, "IQR of an empty list");
  std::vector<float> buf(values.begin(), values.end());
  return iqr_inplace(buf);
}

std::vector<float> iqr_vector(const AttributionMatrix& m) {
  require(m.occlusions >= 1 && m.taps >= 1, ErrorKind::kData, "IQR of an empty attribution matrix");
  require(m.values.size() == m.occlusions * m.taps, ErrorKind::kData, "attribution matrix size mismatch");
  std::vector<float> out(m.taps);
  std::vector<float> column(m.occlusions);
  for (std::size_t j = 0; j < m.taps; ++j) {
    for (std::size_t i = 0; i < m.occlusions; ++i) column[i] = m.values[i * m.taps + j];
    out[j] = iqr_inplace(column);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Provenance and batch extraction

std::string Provenance::to_json() const {
  nlohmann::json j{{"segmentation", segmentation}, {"taps", taps}, {"seed", seed}, {"weights_checksum", weights_checksum}};
  return j.dump(2) + "\n";
}

Provenance Provenance::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    return {j.at("segmentation").get<std::string>(), j.at("taps").get<std::string>(), j.at("seed").get<std::uint64_t>(),
            j.at("weights_checksum").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("bad provenance block: ") + e.what());
  }
}

ExtractResult extract_features(const nn::Network& net, const Tensor& batch, const seg::SegmentationSpec& segmentation,
                               std::span<const TapSet> taps, const ExtractOptions& options,
                               std::span<const seg::LabelMap> maps) {
  require(batch.rank() == 4, ErrorKind::kConfig, "expected an N x C x H x W batch");
  require(!taps.empty(), ErrorKind::kConfig, "no tap sets requested");
  const std::size_t n = static_cast<std::size_t>(batch.dim(0));
  require(maps.empty() || maps.size() == n, ErrorKind::kConfig,
          "got " + std::to_string(maps.size()) + " label maps for " + std::to_string(n) + " images");

  ExtractResult result;
  result.vectors.assign(taps.size(), std::vector<IqrVector>(n));
  if (options.retain_matrices) result.matrices.assign(taps.size(), std::vector<AttributionMatrix>(n));
  result.segment_counts.assign(n, 0);
  std::vector<std::uint64_t> bytes(n, 0);

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        const Tensor image = batch.item_tensor(i);
        const seg::LabelMap map = maps.empty() ? seg::segment(image, segmentation) : maps[i];
        auto mats = loo_attributions(net, image, map, taps, LooOptions{options.chunk, options.counter});
        result.segment_counts[i] = map.segment_count;
        for (std::size_t t = 0; t < taps.size(); ++t) {
          mats[t].image_id = i;
          bytes[i] += mats[t].byte_size();
          result.vectors[t][i] = IqrVector{i, iqr_vector(mats[t])};
          if (options.retain_matrices) result.matrices[t][i] = std::move(mats[t]);
        }
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(n)));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  result.attribution_bytes = std::accumulate(bytes.begin(), bytes.end(), std::uint64_t{0});
  return result;
}

}  // namespace segloo::attr
