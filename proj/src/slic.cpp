#include <algorithm>
#include <cmath>
#include <limits>

#include "internal/disjoint_set.hpp"
#include "internal/image.hpp"
#include "segloo/error.hpp"
#include "segloo/segmentation.hpp"

namespace segloo::seg {

namespace {

struct Centre {
  double y, x, l, a, b;
};

// Splits the 4-connected components of `labels`. Fragments that are not the largest piece of
// their label, or are smaller than min_size, are merged into the largest adjacent region.
std::vector<std::uint32_t> enforce_connectivity(const std::vector<std::uint32_t>& labels, int h, int w,
                                                std::size_t min_size) {
  const std::size_t n = labels.size();
  std::vector<std::uint32_t> comp(n, UINT32_MAX);
  std::vector<std::size_t> comp_size;
  std::vector<std::uint32_t> comp_label;
  std::vector<int> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] != UINT32_MAX) continue;
    const auto id = static_cast<std::uint32_t>(comp_size.size());
    comp_size.push_back(0);
    comp_label.push_back(labels[start]);
    comp[start] = id;
    stack.push_back(static_cast<int>(start));
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++comp_size[id];
      const int y = p / w, x = p % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[1] < 0 || nb[0] >= h || nb[1] >= w) continue;
        const int q = nb[0] * w + nb[1];
        if (comp[q] == UINT32_MAX && labels[q] == labels[start]) {
          comp[q] = id;
          stack.push_back(q);
        }
      }
    }
  }
  const std::size_t ncomp = comp_size.size();
  // Largest component per label (first in scan order on ties).
  std::vector<std::uint32_t> largest_of_label;
  for (std::uint32_t c = 0; c < ncomp; ++c) {
    const std::uint32_t l = comp_label[c];
    if (l >= largest_of_label.size()) largest_of_label.resize(l + 1, UINT32_MAX);
    if (largest_of_label[l] == UINT32_MAX || comp_size[c] > comp_size[largest_of_label[l]]) largest_of_label[l] = c;
  }
  std::vector<bool> kept(ncomp, false);
  for (std::uint32_t c = 0; c < ncomp; ++c) {
    kept[c] = largest_of_label[comp_label[c]] == c && comp_size[c] >= min_size;
  }
  if (std::none_of(kept.begin(), kept.end(), [](bool k) { return k; })) {
    // Everything is small: keep the largest fragment as the anchor.
    kept[std::max_element(comp_size.begin(), comp_size.end()) - comp_size.begin()] = true;
  }

  detail::DisjointSet regions(ncomp);
  std::vector<bool> anchored(kept);  // indexed by region root
  for (std::uint32_t c = 0; c < ncomp; ++c) {
    const std::uint32_t r = regions.find(c);
    if (anchored[r]) continue;
    // Find the largest region adjacent to this one.
    std::uint32_t best = UINT32_MAX;
    std::size_t best_size = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (regions.find(comp[p]) != r) continue;
      const int y = static_cast<int>(p) / w, x = static_cast<int>(p) % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[1] < 0 || nb[0] >= h || nb[1] >= w) continue;
        const std::uint32_t o = regions.find(comp[nb[0] * w + nb[1]]);
        if (o == r) continue;
        const std::size_t s = regions.size_of(o);
        if (best == UINT32_MAX || s > best_size || (s == best_size && o < best)) {
          best = o;
          best_size = s;
        }
      }
    }
    if (best == UINT32_MAX) continue;
    const std::uint32_t merged = regions.attach(r, best);
    anchored[merged] = anchored[merged] || anchored[best];
  }
  std::vector<std::uint32_t> out(n);
  for (std::size_t p = 0; p < n; ++p) out[p] = regions.find(comp[p]);
  return out;
}

}  // namespace

LabelMap slic(const Tensor& image, const SlicParams& params) {
  const auto d = detail::image_dims(image);
  require(d.height > 0 && d.width > 0, ErrorKind::kConfig, "slic: image has no pixels");
  require(d.channels == 3, ErrorKind::kConfig, "slic expects an RGB image");
  const int h = d.height, w = d.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  require(params.n_segments >= 1, ErrorKind::kConfig, "slic: n_segments must be at least 1");
  require(static_cast<std::size_t>(params.n_segments) <= n, ErrorKind::kConfig,
          "slic: n_segments " + std::to_string(params.n_segments) + " exceeds pixel count " + std::to_string(n));
  require(params.compactness > 0.0, ErrorKind::kConfig, "slic: compactness must be positive");
  require(params.max_iter >= 0, ErrorKind::kConfig, "slic: max_iter must be non-negative");

  const Tensor lab = rgb_to_lab(image.reshaped({3, h, w}));
  const float* L = lab.data();
  const float* A = L + n;
  const float* B = A + n;

  // Seed grid with spacing sqrt(N/k); rows * cols never exceeds n_segments.
  const double spacing = std::sqrt(static_cast<double>(n) / params.n_segments);
  int rows = std::clamp(static_cast<int>(std::floor(h / spacing)), 1, h);
  int cols = std::clamp(static_cast<int>(std::floor(w / spacing)), 1, w);
  while (rows * cols > params.n_segments) {
    if (cols >= rows && cols > 1) --cols;
    else --rows;
  }
  const double cell_h = static_cast<double>(h) / rows, cell_w = static_cast<double>(w) / cols;
  const double step = std::max(cell_h, cell_w);

  std::vector<Centre> centres;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Centre ct{(r + 0.5) * cell_h - 0.5, (c + 0.5) * cell_w - 0.5, 0, 0, 0};
      const int py = std::clamp(static_cast<int>(std::lround(ct.y)), 0, h - 1);
      const int px = std::clamp(static_cast<int>(std::lround(ct.x)), 0, w - 1);
      ct.l = L[py * w + px];
      ct.a = A[py * w + px];
      ct.b = B[py * w + px];
      centres.push_back(ct);
    }
  }

  // Initial assignment: the grid cell containing each pixel.
  std::vector<std::uint32_t> label(n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int r = std::min(rows - 1, static_cast<int>(y / cell_h));
      const int c = std::min(cols - 1, static_cast<int>(x / cell_w));
      label[y * w + x] = static_cast<std::uint32_t>(r * cols + c);
    }
  }

  const double spatial_weight = (params.compactness / step) * (params.compactness / step);
  std::vector<double> best(n);
  for (int iter = 0; iter < params.max_iter; ++iter) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centres.size(); ++k) {
      const Centre& ct = centres[k];
      const int y0 = std::max(0, static_cast<int>(std::ceil(ct.y - step)));
      const int y1 = std::min(h - 1, static_cast<int>(std::floor(ct.y + step)));
      const int x0 = std::max(0, static_cast<int>(std::ceil(ct.x - step)));
      const int x1 = std::min(w - 1, static_cast<int>(std::floor(ct.x + step)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const int p = y * w + x;
          const double dl = L[p] - ct.l, da = A[p] - ct.a, db = B[p] - ct.b;
          const double dy = y - ct.y, dx = x - ct.x;
          const double dist = dl * dl + da * da + db * db + (dy * dy + dx * dx) * spatial_weight;
          if (dist < best[p]) {
            best[p] = dist;
            label[p] = static_cast<std::uint32_t>(k);
          }
        }
      }
    }
    std::vector<Centre> sum(centres.size(), Centre{0, 0, 0, 0, 0});
    std::vector<std::size_t> count(centres.size(), 0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int p = y * w + x;
        Centre& s = sum[label[p]];
        s.y += y;
        s.x += x;
        s.l += L[p];
        s.a += A[p];
        s.b += B[p];
        ++count[label[p]];
      }
    }
    for (std::size_t k = 0; k < centres.size(); ++k) {
      if (count[k] == 0) continue;
      const double inv = 1.0 / static_cast<double>(count[k]);
      centres[k] = {sum[k].y * inv, sum[k].x * inv, sum[k].l * inv, sum[k].a * inv, sum[k].b * inv};
    }
  }

  if (params.enforce_connectivity) {
    const auto min_size = static_cast<std::size_t>(0.5 * static_cast<double>(n) / centres.size());
    label = enforce_connectivity(label, h, w, std::max<std::size_t>(1, min_size));
  }
  return relabel_contiguous(h, w, label);
}

}  // namespace segloo::seg
