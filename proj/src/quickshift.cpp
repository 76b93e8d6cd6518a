#include <cmath>
#include <limits>

#include "internal/image.hpp"
#include "segloo/error.hpp"
#include "segloo/segmentation.hpp"

namespace segloo::seg {

LabelMap quickshift(const Tensor& image, const QuickshiftParams& params) {
  const auto d = detail::image_dims(image);
  require(d.height > 0 && d.width > 0, ErrorKind::kConfig, "quickshift: image has no pixels");
  require(d.channels == 3, ErrorKind::kConfig, "quickshift expects an RGB image");
  require(params.max_dist > 0.0, ErrorKind::kConfig, "quickshift: max_dist must be positive");
  require(params.kernel_size > 0.0, ErrorKind::kConfig, "quickshift: kernel_size must be positive");
  require(params.sigma >= 0.0, ErrorKind::kConfig, "quickshift: sigma must be non-negative");

  const int h = d.height, w = d.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  Tensor feat = gaussian_smooth(rgb_to_lab(image.reshaped({3, h, w})), params.sigma);
  for (float& v : feat.values()) v = static_cast<float>(v * params.ratio);
  const float* f = feat.data();

  auto joint_sq = [&](int p, int q) {
    const int dy = p / w - q / w, dx = p % w - q % w;
    double s = static_cast<double>(dy) * dy + static_cast<double>(dx) * dx;
    for (int c = 0; c < 3; ++c) {
      const double t = double(f[c * n + p]) - double(f[c * n + q]);
      s += t * t;
    }
    return s;
  };

  // Parzen density in joint (Lab, y, x) space.
  const int kernel_radius = static_cast<int>(std::ceil(3.0 * params.kernel_size));
  const double inv_two_bw = -0.5 / (params.kernel_size * params.kernel_size);
  std::vector<double> density(n, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      double s = 0.0;
      for (int yy = std::max(0, y - kernel_radius); yy <= std::min(h - 1, y + kernel_radius); ++yy) {
        for (int xx = std::max(0, x - kernel_radius); xx <= std::min(w - 1, x + kernel_radius); ++xx) {
          s += std::exp(joint_sq(p, yy * w + xx) * inv_two_bw);
        }
      }
      density[p] = s;
    }
  }
  // Strict total order: density, then lower pixel index wins ties.
  auto higher = [&](int q, int p) { return density[q] > density[p] || (density[q] == density[p] && q < p); };

  // Link to the nearest higher-density pixel within max_dist (joint distance); none means root.
  const int link_radius = static_cast<int>(std::ceil(params.max_dist));
  const double max_sq = params.max_dist * params.max_dist;
  std::vector<int> parent(n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      parent[p] = p;
      double best = std::numeric_limits<double>::infinity();
      for (int yy = std::max(0, y - link_radius); yy <= std::min(h - 1, y + link_radius); ++yy) {
        for (int xx = std::max(0, x - link_radius); xx <= std::min(w - 1, x + link_radius); ++xx) {
          const int q = yy * w + xx;
          if (!higher(q, p)) continue;
          const double dsq = joint_sq(p, q);
          if (dsq > max_sq) continue;
          if (dsq < best || (dsq == best && q < parent[p])) {
            best = dsq;
            parent[p] = q;
          }
        }
      }
    }
  }
  std::vector<std::uint32_t> root(n);
  for (std::size_t i = 0; i < n; ++i) {
    int r = static_cast<int>(i);
    while (parent[r] != r) r = parent[r];
    root[i] = static_cast<std::uint32_t>(r);
  }
  return relabel_contiguous(h, w, root);
}

}  // namespace segloo::seg
