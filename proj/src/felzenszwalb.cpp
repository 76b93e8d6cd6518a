#include <algorithm>
#include <cmath>
#include <numeric>

#include "internal/disjoint_set.hpp"
#include "internal/image.hpp"
#include "segloo/error.hpp"
#include "segloo/segmentation.hpp"

namespace segloo::seg {

namespace {

struct Edge {
  std::uint32_t a;
  std::uint32_t b;
  double weight;
};

// 8-connected grid graph; each pixel owns its right, down, down-right and up-right edges.
std::vector<Edge> grid_edges(const Tensor& smoothed, int h, int w, int channels) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const float* px = smoothed.data();
  auto dist = [&](int p, int q) {
    double s = 0.0;
    for (int c = 0; c < channels; ++c) {
      const double d = double(px[c * plane + p]) - double(px[c * plane + q]);
      s += d * d;
    }
    return std::sqrt(s);
  };
  std::vector<Edge> edges;
  edges.reserve(4 * plane);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      auto add = [&](int yy, int xx) {
        if (yy < 0 || xx < 0 || yy >= h || xx >= w) return;
        const int q = yy * w + xx;
        edges.push_back({static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(q), dist(p, q)});
      };
      add(y, x + 1);
      add(y + 1, x);
      add(y + 1, x + 1);
      add(y - 1, x + 1);
    }
  }
  return edges;
}

}  // namespace

LabelMap felzenszwalb(const Tensor& image, const FelzParams& params) {
  const auto d = detail::image_dims(image);
  require(d.height > 0 && d.width > 0, ErrorKind::kConfig, "felzenszwalb: image has no pixels");
  require(params.scale > 0.0, ErrorKind::kConfig, "felzenszwalb: scale must be positive");
  require(params.sigma >= 0.0, ErrorKind::kConfig, "felzenszwalb: sigma must be non-negative");
  require(params.min_size >= 1, ErrorKind::kConfig, "felzenszwalb: min_size must be at least 1");

  const int h = d.height, w = d.width;
  const Tensor smoothed = gaussian_smooth(image, params.sigma);
  auto edges = grid_edges(smoothed, h, w, d.channels);
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.weight < y.weight; });

  // Colour distances live in [0,1] space while scale is quoted in 8-bit units.
  const double k = params.scale / 255.0;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  detail::DisjointSet sets(n);
  std::vector<double> internal(n, 0.0);  // largest MST edge inside each component
  for (const Edge& e : edges) {
    const std::uint32_t a = sets.find(e.a), b = sets.find(e.b);
    if (a == b) continue;
    const double ta = internal[a] + k / static_cast<double>(sets.size_of(a));
    const double tb = internal[b] + k / static_cast<double>(sets.size_of(b));
    if (e.weight <= std::min(ta, tb)) {
      const std::uint32_t root = sets.unite(a, b);
      internal[root] = e.weight;  // edges arrive in non-decreasing order
    }
  }
  for (const Edge& e : edges) {
    const std::uint32_t a = sets.find(e.a), b = sets.find(e.b);
    if (a == b) continue;
    if (sets.size_of(a) < static_cast<std::size_t>(params.min_size) ||
        sets.size_of(b) < static_cast<std::size_t>(params.min_size)) {
      sets.unite(a, b);
    }
  }
  std::vector<std::uint32_t> raw(n);
  for (std::size_t i = 0; i < n; ++i) raw[i] = sets.find(static_cast<std::uint32_t>(i));
  return relabel_contiguous(h, w, raw);
}

}  // namespace segloo::seg
