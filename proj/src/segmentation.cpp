#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "internal/bytes.hpp"
#include "internal/image.hpp"
#include "internal/params.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/segmentation.hpp"

namespace segloo::seg {

std::vector<std::size_t> LabelMap::segment_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(segment_count), 0);
  for (std::uint32_t l : labels) {
    if (l < sizes.size()) ++sizes[l];
  }
  return sizes;
}

void LabelMap::validate() const {
  require(height > 0 && width > 0, ErrorKind::kData, "label map has degenerate extents");
  require(labels.size() == static_cast<std::size_t>(height) * width, ErrorKind::kData,
          "label map size does not match its extents");
  require(segment_count >= 1, ErrorKind::kData, "label map has no segments");
  std::vector<bool> used(static_cast<std::size_t>(segment_count), false);
  for (std::uint32_t l : labels) {
    require(l < static_cast<std::uint32_t>(segment_count), ErrorKind::kData,
            "label " + std::to_string(l) + " exceeds segment count " + std::to_string(segment_count));
    used[l] = true;
  }
  require(std::all_of(used.begin(), used.end(), [](bool u) { return u; }), ErrorKind::kData,
          "label map skips a segment id");
}

LabelMap relabel_contiguous(int height, int width, std::span<const std::uint32_t> raw) {
  require(raw.size() == static_cast<std::size_t>(height) * width, ErrorKind::kConfig,
          "label buffer does not match extents");
  std::vector<std::uint32_t> ids(raw.begin(), raw.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  LabelMap out;
  out.height = height;
  out.width = width;
  out.segment_count = static_cast<int>(ids.size());
  out.labels.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out.labels[i] = static_cast<std::uint32_t>(std::lower_bound(ids.begin(), ids.end(), raw[i]) - ids.begin());
  }
  return out;
}

LabelMap relabel_contiguous(const LabelMap& map) { return relabel_contiguous(map.height, map.width, map.labels); }

LabelMap per_pixel(int height, int width) {
  require(height > 0 && width > 0, ErrorKind::kConfig, "per-pixel segmentation needs a non-empty image");
  LabelMap out;
  out.height = height;
  out.width = width;
  out.segment_count = height * width;
  out.labels.resize(static_cast<std::size_t>(height) * width);
  for (std::size_t i = 0; i < out.labels.size(); ++i) out.labels[i] = static_cast<std::uint32_t>(i);
  return out;
}

LabelMap per_pixel(const Tensor& image) {
  const auto d = detail::image_dims(image);
  return per_pixel(d.height, d.width);
}

LabelMap segment(const Tensor& image, const SegmentationSpec& spec) {
  switch (spec.method) {
    case Method::kPerPixel: return per_pixel(image);
    case Method::kFelzenszwalb: return felzenszwalb(image, spec.felz);
    case Method::kQuickshift: return quickshift(image, spec.quick);
    case Method::kSlic: return slic(image, spec.slic);
  }
  fail(ErrorKind::kConfig, "unknown segmentation method");
}

bool is_four_connected(const LabelMap& map) {
  const int h = map.height, w = map.width;
  std::vector<int> seen_components(static_cast<std::size_t>(map.segment_count), 0);
  std::vector<bool> visited(map.labels.size(), false);
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (visited[start]) continue;
    const std::uint32_t l = map.labels[start];
    if (++seen_components[l] > 1) return false;
    stack.push_back(start);
    visited[start] = true;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / w, x = p % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[1] < 0 || n[0] >= h || n[1] >= w) continue;
        const int q = n[0] * w + n[1];
        if (!visited[q] && map.labels[q] == l) {
          visited[q] = true;
          stack.push_back(q);
        }
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Colour and smoothing

Tensor rgb_to_lab(const Tensor& image) {
  const auto d = detail::image_dims(image);
  require(d.channels == 3, ErrorKind::kConfig, "rgb_to_lab expects 3 channels");
  const std::size_t n = static_cast<std::size_t>(d.height) * d.width;
  Tensor out({3, d.height, d.width});
  const float* src = image.data();
  auto linear = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
  auto f = [](double t) { return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0; };
  for (std::size_t i = 0; i < n; ++i) {
    const double r = linear(src[i]), g = linear(src[n + i]), b = linear(src[2 * n + i]);
    const double x = (0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.95047;
    const double y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
    const double z = (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.08883;
    const double fx = f(x), fy = f(y), fz = f(z);
    out[i] = static_cast<float>(y > 0.008856 ? 116.0 * fy - 16.0 : 903.3 * y);
    out[n + i] = static_cast<float>(500.0 * (fx - fy));
    out[2 * n + i] = static_cast<float>(200.0 * (fy - fz));
  }
  return out;
}

namespace {

// Half-sample symmetric reflection: (d c b a | a b c d | d c b a).
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

Tensor gaussian_smooth(const Tensor& image, double sigma) {
  require(sigma >= 0.0, ErrorKind::kConfig, "sigma must be non-negative");
  const auto d = detail::image_dims(image);
  Tensor out({d.channels, d.height, d.width}, std::vector<float>(image.values().begin(), image.values().end()));
  if (sigma == 0.0) return out;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) total += kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (double& k : kernel) k /= total;

  const int h = d.height, w = d.width;
  std::vector<float> tmp(static_cast<std::size_t>(h) * w);
  for (int c = 0; c < d.channels; ++c) {
    float* plane = out.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k) s += kernel[k + radius] * plane[y * w + reflect_index(x + k, w)];
        tmp[y * w + x] = static_cast<float>(s);
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k) s += kernel[k + radius] * tmp[reflect_index(y + k, h) * w + x];
        plane[y * w + x] = static_cast<float>(s);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spec parsing

SegmentationSpec SegmentationSpec::parse(const std::string& text) {
  const auto [name, kv] = detail::parse_cell(text);
  SegmentationSpec spec;
  auto unknown = [&](const std::string& k) { fail(ErrorKind::kConfig, "unknown " + name + " parameter '" + k + "'"); };
  if (name == "per-pixel" || name == "per_pixel" || name == "mlloo") {
    spec.method = Method::kPerPixel;
    if (!kv.empty()) unknown(kv.begin()->first);
  } else if (name == "felzenszwalb" || name == "felz") {
    spec.method = Method::kFelzenszwalb;
    for (const auto& [k, v] : kv) {
      if (k == "scale") spec.felz.scale = detail::to_double(k, v);
      else if (k == "sigma") spec.felz.sigma = detail::to_double(k, v);
      else if (k == "min_size") spec.felz.min_size = static_cast<int>(detail::to_double(k, v));
      else unknown(k);
    }
  } else if (name == "quickshift") {
    spec.method = Method::kQuickshift;
    for (const auto& [k, v] : kv) {
      if (k == "sigma") spec.quick.sigma = detail::to_double(k, v);
      else if (k == "max_dist") spec.quick.max_dist = detail::to_double(k, v);
      else if (k == "kernel_size") spec.quick.kernel_size = detail::to_double(k, v);
      else if (k == "ratio") spec.quick.ratio = detail::to_double(k, v);
      else unknown(k);
    }
  } else if (name == "slic") {
    spec.method = Method::kSlic;
    for (const auto& [k, v] : kv) {
      if (k == "n_segments") spec.slic.n_segments = static_cast<int>(detail::to_double(k, v));
      else if (k == "compactness") spec.slic.compactness = detail::to_double(k, v);
      else if (k == "max_iter") spec.slic.max_iter = static_cast<int>(detail::to_double(k, v));
      else if (k == "enforce_connectivity") spec.slic.enforce_connectivity = detail::to_double(k, v) != 0.0;
      else unknown(k);
    }
  } else {
    fail(ErrorKind::kConfig, "unknown segmentation method '" + name + "'");
  }
  return spec;
}

std::string SegmentationSpec::method_name() const {
  switch (method) {
    case Method::kPerPixel: return "per-pixel";
    case Method::kFelzenszwalb: return "felzenszwalb";
    case Method::kQuickshift: return "quickshift";
    case Method::kSlic: return "slic";
  }
  return "?";
}

std::string SegmentationSpec::to_string() const {
  switch (method) {
    case Method::kPerPixel:
      return "per-pixel";
    case Method::kFelzenszwalb:
      return "felzenszwalb:scale=" + detail::fmt(felz.scale) + ",sigma=" + detail::fmt(felz.sigma) + ",min_size=" +
             std::to_string(felz.min_size);
    case Method::kQuickshift:
      return "quickshift:sigma=" + detail::fmt(quick.sigma) + ",max_dist=" + detail::fmt(quick.max_dist) + ",kernel_size=" +
             detail::fmt(quick.kernel_size) + ",ratio=" + detail::fmt(quick.ratio);
    case Method::kSlic:
      return "slic:n_segments=" + std::to_string(slic.n_segments) + ",compactness=" + detail::fmt(slic.compactness) +
             ",max_iter=" + std::to_string(slic.max_iter) +
             ",enforce_connectivity=" + (slic.enforce_connectivity ? "1" : "0");
  }
  return "?";
}

// ---------------------------------------------------------------------------
// SEGL container

namespace {
constexpr char kMagic[4] = {'S', 'E', 'G', 'L'};
}

std::vector<std::uint8_t> encode_label_maps(std::span<const LabelMap> maps) {
  detail::ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(maps.size()));
  for (const auto& m : maps) {
    require(m.height <= 0xFFFF && m.width <= 0xFFFF, ErrorKind::kConfig, "label map too large for SEGL");
    w.u16(static_cast<std::uint16_t>(m.height));
    w.u16(static_cast<std::uint16_t>(m.width));
    w.u32(static_cast<std::uint32_t>(m.segment_count));
    for (std::uint32_t l : m.labels) w.u32(l);
  }
  return std::move(w.buffer());
}

std::vector<LabelMap> decode_label_maps(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::kFormat, "label map file: bad magic (expected SEGL)");
  }
  detail::ByteReader r(bytes, "label map file");
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != 1) fail(ErrorKind::kFormat, "label map file: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<LabelMap> maps;
  for (std::uint32_t i = 0; i < count; ++i) {
    LabelMap m;
    m.height = r.u16();
    m.width = r.u16();
    m.segment_count = static_cast<int>(r.u32());
    m.labels.resize(static_cast<std::size_t>(m.height) * m.width);
    for (auto& l : m.labels) l = r.u32();
    m.validate();
    maps.push_back(std::move(m));
  }
  if (r.remaining() != 0) fail(ErrorKind::kData, "label map file: trailing bytes at offset " + std::to_string(r.offset()));
  return maps;
}

void save_label_maps(const std::filesystem::path& path, std::span<const LabelMap> maps) {
  io::write_bytes_atomic(path, encode_label_maps(maps));
}

std::vector<LabelMap> load_label_maps(const std::filesystem::path& path) { return decode_label_maps(io::read_bytes(path)); }

}  // namespace segloo::seg
