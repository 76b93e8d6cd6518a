#include <algorithm>
#include <chrono>
#include <numeric>

#include <nlohmann/json.hpp>

#include "internal/csv.hpp"
#include "segloo/error.hpp"
#include "segloo/pipeline.hpp"

namespace segloo::pipeline {

std::uint64_t attribution_bytes(std::span<const int> segment_counts, std::size_t dimension) {
  std::uint64_t total = 0;
  for (int k : segment_counts) total += static_cast<std::uint64_t>(k) * dimension * sizeof(float);
  return total;
}

std::uint64_t forward_passes(std::span<const int> segment_counts) {
  std::uint64_t total = 0;
  for (int k : segment_counts) total += static_cast<std::uint64_t>(k) + 1;
  return total;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<BenchRecord> run_bench(const nn::Network& net, const Tensor& images,
                                   std::span<const seg::SegmentationSpec> segmentations,
                                   std::span<const attr::TapSpec> modes, const BenchOptions& options,
                                   const std::function<void(const BenchRecord&)>& on_record) {
  require(options.repeats >= 1 && options.warmup >= 0 && options.workers >= 1, ErrorKind::kConfig,
          "bench: repeats must be >= 1, warmup >= 0 and workers >= 1");
  require(images.rank() == 4 && images.dim(0) > 0, ErrorKind::kConfig, "bench: no images to time");
  const std::size_t n = static_cast<std::size_t>(images.dim(0));
  std::vector<BenchRecord> out;
  for (const auto& s : segmentations) {
    for (const auto& m : modes) {
      const attr::TapSet taps = attr::select_taps(net, m);
      BenchRecord rec;
      rec.segmentation = s.to_string();
      rec.mode = m.to_string();
      rec.images = n;
      rec.workers = options.workers;
      rec.repeats = options.repeats;
      std::vector<double> times;
      for (int run = 0; run < options.warmup + options.repeats; ++run) {
        attr::PassCounter counter;
        attr::ExtractOptions eo;
        eo.workers = options.workers;
        eo.chunk = options.chunk;
        eo.counter = &counter;
        const auto t0 = std::chrono::steady_clock::now();
        const auto res = attr::extract_features(net, images, s, std::span<const attr::TapSet>(&taps, 1), eo);
        const auto t1 = std::chrono::steady_clock::now();
        if (run < options.warmup) continue;
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
        rec.forward_passes = counter.value();
        rec.attribution_bytes = attribution_bytes(res.segment_counts, taps.dimension());
        rec.mean_segments = std::accumulate(res.segment_counts.begin(), res.segment_counts.end(), 0.0) / n;
      }
      rec.median_seconds = median(times);
      rec.seconds_per_128 = rec.median_seconds * 128.0 / static_cast<double>(n);
      if (on_record) on_record(rec);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::string bench_csv(std::span<const BenchRecord> records) {
  std::string s = detail::csv_line({"segmentation", "mode", "images", "workers", "repeats", "median_seconds",
                                    "seconds_per_128", "forward_passes", "attribution_bytes", "mean_segments", "auc"});
  for (const auto& r : records) {
    s += detail::csv_line({r.segmentation, r.mode, std::to_string(r.images), std::to_string(r.workers),
                           std::to_string(r.repeats), detail::double_text(r.median_seconds),
                           detail::double_text(r.seconds_per_128), std::to_string(r.forward_passes),
                           std::to_string(r.attribution_bytes), detail::double_text(r.mean_segments),
                           r.auc < 0 ? std::string() : detail::double_text(r.auc)});
  }
  return s;
}

std::string scatter_csv(std::span<const BenchRecord> records) {
  std::string s = detail::csv_line({"attack", "segmentation", "mode", "seconds_per_128", "attribution_bytes", "auc"});
  for (const auto& r : records) {
    if (r.auc < 0) continue;
    s += detail::csv_line({r.attack, r.segmentation, r.mode, detail::double_text(r.seconds_per_128),
                           std::to_string(r.attribution_bytes), detail::double_text(r.auc)});
  }
  return s;
}

Extraction extract_experiment(const nn::Network& net, const data::Experiment& exp, const seg::SegmentationSpec& segmentation,
                              std::span<const attr::TapSpec> modes, const attr::ExtractOptions& options,
                              const std::string& weights_checksum, std::span<const seg::LabelMap> maps) {
  require(!modes.empty(), ErrorKind::kConfig, "extract: no tap modes given");
  const std::size_t nb = exp.benign.size(), na = exp.adversarial.size();
  require(maps.empty() || maps.size() == nb + na, ErrorKind::kData,
          "extract: " + std::to_string(maps.size()) + " label maps for " + std::to_string(nb + na) + " images");
  std::vector<attr::TapSet> taps;
  for (const auto& m : modes) taps.push_back(attr::select_taps(net, m));

  attr::PassCounter counter;
  attr::ExtractOptions eo = options;
  eo.counter = &counter;
  const auto benign = attr::extract_features(net, exp.benign.images, segmentation, taps, eo,
                                             maps.empty() ? maps : maps.subspan(0, nb));
  const auto adversarial = attr::extract_features(net, exp.adversarial.images, segmentation, taps, eo,
                                                  maps.empty() ? maps : maps.subspan(nb, na));
  if (options.counter) options.counter->add(counter.value());

  Extraction out;
  out.forward_passes = counter.value();
  out.benign_segments = benign.segment_counts;
  out.adversarial_segments = adversarial.segment_counts;
  for (std::size_t t = 0; t < taps.size(); ++t) {
    auto values = [](const std::vector<attr::IqrVector>& v) {
      std::vector<std::vector<float>> r;
      for (const auto& x : v) r.push_back(x.values);
      return r;
    };
    const auto bf = values(benign.vectors[t]);
    const auto af = values(adversarial.vectors[t]);
    attr::Provenance prov{segmentation.to_string(), modes[t].to_string(), modes[t].seed, weights_checksum};
    out.datasets.push_back(data::feature_dataset(exp, bf, af, prov.to_json()));
  }
  return out;
}

}  // namespace segloo::pipeline
