#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segloo/tensor.hpp"

namespace segloo::seg {

/// Per-pixel segment ids for one H x W image. Labels are 0..segment_count-1, all used.
struct LabelMap {
  int height = 0;
  int width = 0;
  int segment_count = 0;
  std::vector<std::uint32_t> labels;  // row-major

  std::uint32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t pixel_count() const { return labels.size(); }
  // Pixel counts per segment.
  std::vector<std::size_t> segment_sizes() const;
  // Throws unless the map is a partition with contiguous labels.
  void validate() const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct FelzParams {
  double scale = 1.0;  // merge threshold constant, in 8-bit intensity units
  double sigma = 0.8;  // Gaussian pre-smoothing
  int min_size = 20;
};

struct QuickshiftParams {
  double sigma = 0.0;        // Gaussian pre-smoothing of the Lab image
  double max_dist = 10.0;    // longest parent link kept, in joint (Lab, x, y) units
  double kernel_size = 5.0;  // Parzen bandwidth
  double ratio = 1.0;        // colour weight against space
};

struct SlicParams {
  int n_segments = 100;
  double compactness = 10.0;
  int max_iter = 10;
  bool enforce_connectivity = true;
};

enum class Method { kPerPixel, kFelzenszwalb, kQuickshift, kSlic };

/// A segmentation method with its parameters, e.g. "slic:n_segments=64".
struct SegmentationSpec {
  Method method = Method::kPerPixel;
  FelzParams felz;
  QuickshiftParams quick;
  SlicParams slic;

  static SegmentationSpec parse(const std::string& text);
  std::string to_string() const;
  std::string method_name() const;
};

// Images are channel-first tensors [3,H,W] (or [1,3,H,W]) with values in [0,1].
LabelMap felzenszwalb(const Tensor& image, const FelzParams& params);
LabelMap quickshift(const Tensor& image, const QuickshiftParams& params);
LabelMap slic(const Tensor& image, const SlicParams& params);
LabelMap per_pixel(int height, int width);
LabelMap per_pixel(const Tensor& image);
LabelMap segment(const Tensor& image, const SegmentationSpec& spec);

// Renumbers labels to 0..k-1 in ascending order of the original ids.
LabelMap relabel_contiguous(const LabelMap& map);
// Same, from raw per-pixel ids (any values).
LabelMap relabel_contiguous(int height, int width, std::span<const std::uint32_t> raw);

// sRGB (D65) to CIELAB; output is [3,H,W] holding L, a, b.
Tensor rgb_to_lab(const Tensor& image);
// Separable Gaussian per channel, radius ceil(3 sigma), reflect padding. sigma = 0 is the identity.
Tensor gaussian_smooth(const Tensor& image, double sigma);

// True when every segment is a single 4-connected region.
bool is_four_connected(const LabelMap& map);

// Label-map container ("SEGL").
std::vector<std::uint8_t> encode_label_maps(std::span<const LabelMap> maps);
std::vector<LabelMap> decode_label_maps(std::span<const std::uint8_t> bytes);
void save_label_maps(const std::filesystem::path& path, std::span<const LabelMap> maps);
std::vector<LabelMap> load_label_maps(const std::filesystem::path& path);

}  // namespace segloo::seg
