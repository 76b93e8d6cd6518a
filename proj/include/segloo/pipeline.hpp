#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segloo/attribution.hpp"
#include "segloo/data.hpp"
#include "segloo/nn.hpp"

namespace segloo::pipeline {

using json = nlohmann::json;

/// Bytes of attribution values for images with the given occlusion counts and tap dimension.
std::uint64_t attribution_bytes(std::span<const int> segment_counts, std::size_t dimension);
std::uint64_t forward_passes(std::span<const int> segment_counts);

struct BenchRecord {
  std::string segmentation;
  std::string mode;
  std::size_t images = 0;
  int workers = 1;
  int repeats = 0;
  double median_seconds = 0.0;        // whole batch
  double seconds_per_128 = 0.0;       // median scaled to a 128-image batch
  std::uint64_t forward_passes = 0;   // one run
  std::uint64_t attribution_bytes = 0;
  double mean_segments = 0.0;
  double auc = -1.0;  // negative when no detector result was paired
  std::string attack;  // of the paired detector result
};

struct BenchOptions {
  int repeats = 3;
  int warmup = 1;
  int workers = 1;
  int chunk = 32;
};

/// Times feature extraction for every (segmentation, mode) cell on `images`: `warmup`
/// untimed runs, then the median of `repeats` timed runs.
std::vector<BenchRecord> run_bench(const nn::Network& net, const Tensor& images,
                                   std::span<const seg::SegmentationSpec> segmentations,
                                   std::span<const attr::TapSpec> modes, const BenchOptions& options,
                                   const std::function<void(const BenchRecord&)>& on_record = {});

std::string bench_csv(std::span<const BenchRecord> records);
// Time-vs-AUC points: one row per cell that has an AUC.
std::string scatter_csv(std::span<const BenchRecord> records);

/// Features of benign and adversarial images for each tap mode, as labelled datasets.
struct Extraction {
  std::vector<det::FeatureDataset> datasets;  // one per mode
  std::uint64_t forward_passes = 0;
  std::vector<int> benign_segments, adversarial_segments;
};

// Label maps, when given, hold the benign maps followed by the adversarial ones.
Extraction extract_experiment(const nn::Network& net, const data::Experiment& exp, const seg::SegmentationSpec& segmentation,
                              std::span<const attr::TapSpec> modes, const attr::ExtractOptions& options,
                              const std::string& weights_checksum, std::span<const seg::LabelMap> maps = {});

// ---------------------------------------------------------------------------
// File-based stages. Each takes a fully resolved configuration object, writes its outputs
// (plus a provenance sidecar echoing the configuration) under config["out"], and returns a
// summary object.

using Logger = std::function<void(const std::string&)>;

/// Default configuration of a stage; unknown keys in a user config are rejected.
json stage_defaults(const std::string& stage);
json resolve_config(const std::string& stage, const json& user);

json cmd_synth_data(const json& config, const Logger& log = {});
json cmd_train_model(const json& config, const Logger& log = {});
json cmd_attack(const json& config, const Logger& log = {});
json cmd_segment(const json& config, const Logger& log = {});
json cmd_extract(const json& config, const Logger& log = {});
json cmd_train_detector(const json& config, const Logger& log = {});
json cmd_evaluate(const json& config, const Logger& log = {});
json cmd_bench(const json& config, const Logger& log = {});
json cmd_report(const json& config, const Logger& log = {});

/// Dispatches on the stage name ("train-model", ...).
json run_stage(const std::string& stage, const json& config, const Logger& log = {});

}  // namespace segloo::pipeline
