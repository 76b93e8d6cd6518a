#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "segloo/detector.hpp"
#include "segloo/tensor.hpp"

namespace segloo::data {

inline constexpr std::size_t kCifarImageBytes = 3072;
inline constexpr std::size_t kCifarRecordBytes = 3073;

/// N x 3 x 32 x 32 images in [0, 1] with class labels and source ids ("test:17").
struct ImageBatch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  ImageBatch subset(std::span<const std::size_t> indices) const;
  static ImageBatch concat(std::span<const ImageBatch> parts);
};

// CIFAR-10 binary records: label byte, then 1024 R, 1024 G, 1024 B bytes.
ImageBatch decode_cifar(std::span<const std::uint8_t> bytes, const std::string& id_prefix);
std::vector<std::uint8_t> encode_cifar(const ImageBatch& batch);
ImageBatch read_cifar_file(const std::filesystem::path& path, const std::string& id_prefix);
void write_cifar_file(const std::filesystem::path& path, const ImageBatch& batch);

// Lossless float container for image batches (ids and labels included), used for
// attacked images, which do not survive quantization to CIFAR bytes.
std::vector<std::uint8_t> encode_image_batch(const ImageBatch& batch);
ImageBatch decode_image_batch(std::span<const std::uint8_t> bytes);
void write_image_batch(const std::filesystem::path& path, const ImageBatch& batch);
ImageBatch read_image_batch(const std::filesystem::path& path);

struct CifarFiles {
  std::vector<std::filesystem::path> train;  // data_batch_1..5.bin
  std::filesystem::path test;                // test_batch.bin
};

/// Locates the binary distribution inside `dir` (also looks in cifar-10-batches-bin/).
CifarFiles locate_cifar10(const std::filesystem::path& dir);

struct CifarSplit {
  ImageBatch train, test;
};
CifarSplit load_cifar10(const std::filesystem::path& dir);

/// Procedural 10-class images in the CIFAR binary layout: each class is a shape family with
/// a characteristic hue, drawn at random position, size and colour over a textured background.
struct SynthParams {
  std::size_t train_per_file = 10000;
  std::size_t test_records = 10000;
  int train_files = 5;
  std::uint64_t seed = 0;
};
ImageBatch synth_batch(std::size_t count, std::uint64_t seed, const std::string& id_prefix);
CifarFiles write_synthetic_cifar(const std::filesystem::path& dir, const SynthParams& params);

// Feature table: image_id,source,attack,epsilon,label,f0..f{d-1}; provenance JSON beside it.
std::string features_csv(const det::FeatureDataset& ds);
det::FeatureDataset parse_features_csv(const std::string& text);
std::filesystem::path provenance_path(const std::filesystem::path& csv);
void write_features(const std::filesystem::path& path, const det::FeatureDataset& ds);
det::FeatureDataset read_features(const std::filesystem::path& path);

/// One evaluation cell: attack x segmentation x tap mode x detector.
struct ReportRow {
  std::string attack;
  std::string segmentation;
  std::string mode;
  std::string detector;
  std::size_t dimension = 0;
  double auc = 0.0;
  double accuracy = 0.0;
  std::size_t test_count = 0;
  std::size_t benign = 0;
  std::size_t adversarial = 0;
  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};
std::string report_csv(std::span<const ReportRow> rows);
std::vector<ReportRow> parse_report_csv(const std::string& text);
void write_report(const std::filesystem::path& path, std::span<const ReportRow> rows);
std::vector<ReportRow> read_report(const std::filesystem::path& path);

/// Sidecar of an adversarial batch file.
struct AdversarialMeta {
  std::string attack;  // attack spec string
  std::vector<double> epsilons;  // per image
  std::uint64_t seed = 0;
  std::vector<bool> success;
  std::vector<std::string> sources;
  std::vector<int> original_class, adversarial_class;

  std::string to_json() const;
  static AdversarialMeta from_json(const std::string& text);
};
void write_adversarial(const std::filesystem::path& path, const ImageBatch& batch, const AdversarialMeta& meta);
std::pair<ImageBatch, AdversarialMeta> read_adversarial(const std::filesystem::path& path);

/// Reference to an input file with its expected checksum.
struct FileRef {
  std::filesystem::path path;
  std::string checksum;
};

/// Experiment description: which images to sample, how to attack them, and the files it
/// depends on. Relative paths resolve against the manifest's directory.
struct Manifest {
  std::string attack = "fgsm:eps=0.02,0.06,0.1";
  std::size_t batch_count = 3;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;        // image sampling and attack randomness
  std::uint64_t split_seed = 0;  // train/test split of the feature data
  std::string segmentation = "per-pixel";
  std::vector<std::string> modes{"output"};
  bool successful_only = false;
  bool correct_only = false;  // sample only images the model classifies correctly
  FileRef arch, weights;
  std::vector<FileRef> images;  // CIFAR-format files sampled from, in order
  std::filesystem::path base_dir;

  std::string to_json() const;
  static Manifest from_json(const std::string& text, const std::filesystem::path& base_dir = {});
  static Manifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
  // Throws if a referenced file is missing or its checksum differs.
  void verify() const;
};

FileRef file_ref(const std::filesystem::path& path);

struct Experiment {
  ImageBatch benign;
  ImageBatch adversarial;  // adversarial[i] is the attacked benign[i]
  AdversarialMeta meta;

  std::string checksum() const;
};

/// Samples batch_count * batch_size images, attacks each batch with epsilon
/// grid[b * E / batch_count] and pairs them. A pure function of the manifest and its files.
Experiment assemble_experiment(const Manifest& manifest, int workers = 1);

/// Benign and adversarial rows for one tap set of an extraction, with sources taken from
/// the experiment.
det::FeatureDataset feature_dataset(const Experiment& exp, std::span<const std::vector<float>> benign_features,
                                    std::span<const std::vector<float>> adversarial_features,
                                    const std::string& provenance);

}  // namespace segloo::data
