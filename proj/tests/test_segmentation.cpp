#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "internal/rng.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/segmentation.hpp"

using namespace segloo;
using namespace segloo::seg;

namespace {

Tensor uniform_image(int h, int w, float r, float g, float b) {
  Tensor t({3, h, w});
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = r;
    t[n + i] = g;
    t[2 * n + i] = b;
  }
  return t;
}

// Random blocky image with noise: a handful of coloured rectangles on a background.
Tensor blocky_image(int h, int w, std::uint64_t seed) {
  detail::Rng rng(seed);
  Tensor t = uniform_image(h, w, float(rng.uniform()), float(rng.uniform()), float(rng.uniform()));
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const int rects = 2 + static_cast<int>(rng.below(5));
  for (int r = 0; r < rects; ++r) {
    const int y0 = static_cast<int>(rng.below(h)), x0 = static_cast<int>(rng.below(w));
    const int y1 = std::min(h, y0 + 2 + static_cast<int>(rng.below(h / 2 + 1)));
    const int x1 = std::min(w, x0 + 2 + static_cast<int>(rng.below(w / 2 + 1)));
    const float col[3] = {float(rng.uniform()), float(rng.uniform()), float(rng.uniform())};
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        for (int c = 0; c < 3; ++c) t[c * n + y * w + x] = col[c];
  }
  for (float& v : t.values()) v = std::clamp(v + float(0.03 * rng.normal()), 0.0f, 1.0f);
  return t;
}

Tensor noise_image(int h, int w, std::uint64_t seed) {
  detail::Rng rng(seed);
  Tensor t({3, h, w});
  for (float& v : t.values()) v = float(rng.uniform());
  return t;
}

// Canonical form of a partition: labels renumbered by first appearance.
std::vector<std::uint32_t> canonical(const std::vector<std::uint32_t>& labels) {
  std::map<std::uint32_t, std::uint32_t> seen;
  std::vector<std::uint32_t> out;
  for (auto l : labels) out.push_back(seen.try_emplace(l, static_cast<std::uint32_t>(seen.size())).first->second);
  return out;
}

}  // namespace

TEST_CASE("per_pixel labels every pixel separately") {
  auto m = per_pixel(32, 32);
  CHECK(m.segment_count == 1024);
  m.validate();
  auto small = per_pixel(2, 2);
  CHECK(small.labels == std::vector<std::uint32_t>{0, 1, 2, 3});
  CHECK(per_pixel(uniform_image(3, 5, 0, 0, 0)).segment_count == 15);
}

TEST_CASE("relabel_contiguous") {
  LabelMap m{1, 4, 2, {5, 9, 9, 5}};
  auto r = relabel_contiguous(m);
  CHECK(r.labels == std::vector<std::uint32_t>{0, 1, 1, 0});
  CHECK(r.segment_count == 2);
  CHECK(relabel_contiguous(r) == r);

  // pixels share a label before iff after
  detail::Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    LabelMap raw{4, 5, 0, std::vector<std::uint32_t>(20)};
    for (auto& l : raw.labels) l = static_cast<std::uint32_t>(rng.below(7) * 13);
    auto out = relabel_contiguous(raw);
    out.validate();
    for (int i = 0; i < 20; ++i)
      for (int j = 0; j < 20; ++j) CHECK((raw.labels[i] == raw.labels[j]) == (out.labels[i] == out.labels[j]));
  }
}

TEST_CASE("rgb_to_lab white point and primaries") {
  auto lab = rgb_to_lab(uniform_image(1, 1, 1, 1, 1));
  CHECK(lab[0] == doctest::Approx(100.0).epsilon(1e-3));
  CHECK(std::fabs(lab[1]) < 0.5);
  CHECK(std::fabs(lab[2]) < 0.5);
  auto black = rgb_to_lab(uniform_image(1, 1, 0, 0, 0));
  CHECK(std::fabs(black[0]) < 1e-4);
  // sRGB red: L 53.24, a 80.09, b 67.20
  auto red = rgb_to_lab(uniform_image(1, 1, 1, 0, 0));
  CHECK(red[0] == doctest::Approx(53.24).epsilon(2e-3));
  CHECK(red[1] == doctest::Approx(80.09).epsilon(2e-3));
  CHECK(red[2] == doctest::Approx(67.20).epsilon(2e-3));
}

TEST_CASE("gaussian_smooth: identity, direct convolution oracle, mass preservation") {
  auto img = noise_image(9, 11, 3);
  CHECK(gaussian_smooth(img, 0.0) == img.reshaped({3, 9, 11}));

  const double sigma = 1.3;
  auto out = gaussian_smooth(img, sigma);
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  double ksum = 0.0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) ksum += std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 11; ++x) {
        double s = 0.0;
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dx = -radius; dx <= radius; ++dx)
            s += std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma)) *
                 img[(c * 9 + reflect(y + dy, 9)) * 11 + reflect(x + dx, 11)];
        CHECK(out[(c * 9 + y) * 11 + x] == doctest::Approx(s / ksum).epsilon(1e-5));
      }

  // content surrounded by a constant border wider than the kernel keeps its mean
  Tensor padded = uniform_image(30, 30, 0.25f, 0.25f, 0.25f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 11; ++x) padded[(c * 30 + y + 10) * 30 + x + 10] = img[(c * 9 + y) * 11 + x];
  auto smoothed = gaussian_smooth(padded, sigma);
  const double before = std::accumulate(padded.values().begin(), padded.values().end(), 0.0) / padded.size();
  const double after = std::accumulate(smoothed.values().begin(), smoothed.values().end(), 0.0) / smoothed.size();
  CHECK(std::fabs(before - after) < 1e-4);
}

TEST_CASE("felzenszwalb: uniform image is one segment") {
  for (double scale : {1.0, 10.0, 100.0, 1000.0}) {
    auto m = felzenszwalb(uniform_image(16, 16, 0.3f, 0.6f, 0.2f), FelzParams{scale, 0.8, 20});
    CHECK(m.segment_count == 1);
  }
}

TEST_CASE("felzenszwalb: half black / half white matches an explicit union-find oracle") {
  Tensor img = uniform_image(32, 32, 0, 0, 0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 16; x < 32; ++x) img[(c * 32 + y) * 32 + x] = 1.0f;
  const FelzParams params{100.0, 0.0, 10};
  auto m = felzenszwalb(img, params);

  // Oracle: explicit edge list, naive label-array union, same merge rule.
  struct E {
    int a, b;
    double w;
  };
  std::vector<E> edges;
  auto px = [&](int p, int c) { return double(img[c * 1024 + p]); };
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const int off[4][2] = {{0, 1}, {1, 0}, {1, 1}, {-1, 1}};
      for (auto& o : off) {
        const int yy = y + o[0], xx = x + o[1];
        if (yy < 0 || yy >= 32 || xx >= 32) continue;
        double s = 0;
        for (int c = 0; c < 3; ++c) s += (px(y * 32 + x, c) - px(yy * 32 + xx, c)) * (px(y * 32 + x, c) - px(yy * 32 + xx, c));
        edges.push_back({y * 32 + x, yy * 32 + xx, std::sqrt(s)});
      }
    }
  std::stable_sort(edges.begin(), edges.end(), [](const E& a, const E& b) { return a.w < b.w; });
  std::vector<int> comp(1024);
  std::iota(comp.begin(), comp.end(), 0);
  std::vector<double> inner(1024, 0.0);
  auto size_of = [&](int c) { return std::count(comp.begin(), comp.end(), c); };
  auto merge = [&](int from, int into, double w) {
    for (int& c : comp)
      if (c == from) c = into;
    inner[into] = w;
  };
  const double k = params.scale / 255.0;
  for (const auto& e : edges) {
    const int a = comp[e.a], b = comp[e.b];
    if (a == b) continue;
    if (e.w <= std::min(inner[a] + k / size_of(a), inner[b] + k / size_of(b))) merge(b, a, e.w);
  }
  for (const auto& e : edges) {
    const int a = comp[e.a], b = comp[e.b];
    if (a != b && (size_of(a) < params.min_size || size_of(b) < params.min_size)) merge(b, a, inner[a]);
  }
  std::vector<std::uint32_t> expected(comp.begin(), comp.end());
  CHECK(m.segment_count == 2);
  CHECK(canonical(m.labels) == canonical(expected));
  for (int y = 0; y < 32; ++y) CHECK(m.at(y, 0) != m.at(y, 31));
}

TEST_CASE("felzenszwalb: larger scale gives fewer segments, min_size holds") {
  int fewer = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto img = blocky_image(32, 32, seed);
    auto fine = felzenszwalb(img, FelzParams{1.0, 0.8, 20});
    auto coarse = felzenszwalb(img, FelzParams{1000.0, 0.8, 20});
    fine.validate();
    coarse.validate();
    CHECK(coarse.segment_count <= fine.segment_count);
    fewer += coarse.segment_count < fine.segment_count;
    for (auto s : fine.segment_sizes()) CHECK(s >= 20);
    for (auto s : coarse.segment_sizes()) CHECK(s >= 20);
  }
  CHECK(fewer > 0);
  CHECK_THROWS_AS(felzenszwalb(Tensor({3, 0, 4}), FelzParams{}), Error);
}

TEST_CASE("quickshift: single pixel is its own root") {
  auto m = quickshift(uniform_image(1, 1, 0.2f, 0.4f, 0.9f), QuickshiftParams{});
  CHECK(m.segment_count == 1);
  CHECK_THROWS_AS(quickshift(Tensor({3, 0, 0}), QuickshiftParams{}), Error);
}

TEST_CASE("quickshift: uniform 3x3 patch links every pixel to the centre") {
  // centre is nearest to everything, so it is the unique density peak
  Tensor img = uniform_image(3, 3, 0.5f, 0.5f, 0.5f);
  const QuickshiftParams params{0.0, 10.0, 5.0, 1.0};
  auto m = quickshift(img, params);

  // Brute-force oracle over 9 pixels.
  auto lab = rgb_to_lab(img);
  auto d2 = [&](int p, int q) {
    double s = (p / 3 - q / 3) * (p / 3 - q / 3) + (p % 3 - q % 3) * (p % 3 - q % 3);
    for (int c = 0; c < 3; ++c) s += (lab[c * 9 + p] - lab[c * 9 + q]) * (lab[c * 9 + p] - lab[c * 9 + q]);
    return s;
  };
  std::vector<double> dens(9, 0.0);
  for (int p = 0; p < 9; ++p)
    for (int q = 0; q < 9; ++q) dens[p] += std::exp(-d2(p, q) / (2 * 25.0));
  CHECK(std::max_element(dens.begin(), dens.end()) - dens.begin() == 4);
  std::vector<int> parent(9);
  for (int p = 0; p < 9; ++p) {
    parent[p] = p;
    double best = 1e300;
    for (int q = 0; q < 9; ++q) {
      const bool higher = dens[q] > dens[p] || (dens[q] == dens[p] && q < p);
      if (higher && d2(p, q) <= 100.0 && d2(p, q) < best) {
        best = d2(p, q);
        parent[p] = q;
      }
    }
  }
  for (int p = 0; p < 9; ++p) {
    int r = p;
    while (parent[r] != r) r = parent[r];
    CHECK(r == 4);
  }
  CHECK(m.segment_count == 1);
}

TEST_CASE("quickshift: segment count is non-increasing in max_dist") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto img = blocky_image(24, 24, seed);
    int prev = std::numeric_limits<int>::max();
    for (double md : {2.0, 5.0, 10.0, 20.0}) {
      auto m = quickshift(img, QuickshiftParams{1.0, md, 5.0, 1.0});
      m.validate();
      CHECK(m.segment_count <= prev);
      prev = m.segment_count;
    }
  }
  auto noisy = noise_image(32, 32, 77);
  CHECK(quickshift(noisy, QuickshiftParams{0, 20, 5, 1}).segment_count <=
        quickshift(noisy, QuickshiftParams{0, 10, 5, 1}).segment_count);
}

TEST_CASE("slic: one segment, uniform blocks, bounds and connectivity") {
  auto one = slic(noise_image(16, 16, 2), SlicParams{1, 10.0, 10, true});
  CHECK(one.segment_count == 1);

  // Colour term vanishes on a uniform image: pure spatial Voronoi of the 2x2 seed grid.
  auto blocks = slic(uniform_image(32, 32, 0.4f, 0.4f, 0.4f), SlicParams{4, 10.0, 10, true});
  REQUIRE(blocks.segment_count == 4);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) CHECK(blocks.at(y, x) == static_cast<std::uint32_t>((y / 16) * 2 + x / 16));

  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto img = blocky_image(32, 32, seed);
    for (int k : {32, 64, 128}) {
      auto m = slic(img, SlicParams{k, 10.0, 10, true});
      m.validate();
      CHECK(m.segment_count <= k);
      CHECK(m.segment_count >= 1);
      CHECK(is_four_connected(m));
    }
  }
  CHECK_THROWS_AS(slic(noise_image(4, 4, 1), SlicParams{17, 10.0, 10, true}), Error);
}

TEST_CASE("segmentations are deterministic") {
  auto img = blocky_image(32, 32, 99);
  for (const char* s : {"felzenszwalb:scale=10", "quickshift:sigma=1,max_dist=10", "slic:n_segments=64", "per-pixel"}) {
    const auto spec = SegmentationSpec::parse(s);
    CHECK(segment(img, spec) == segment(img, spec));
  }
}

TEST_CASE("segmentation spec parsing") {
  auto s = SegmentationSpec::parse("slic:n_segments=64");
  CHECK(s.method == Method::kSlic);
  CHECK(s.slic.n_segments == 64);
  CHECK(s.slic.compactness == 10.0);
  CHECK(SegmentationSpec::parse(s.to_string()).to_string() == s.to_string());
  auto q = SegmentationSpec::parse("quickshift:sigma=2,max_dist=20");
  CHECK(q.quick.sigma == 2.0);
  CHECK(q.quick.max_dist == 20.0);
  CHECK(SegmentationSpec::parse("felzenszwalb:scale=1000").felz.scale == 1000.0);
  CHECK_THROWS_AS(SegmentationSpec::parse("watershed"), Error);
  CHECK_THROWS_AS(SegmentationSpec::parse("slic:n_segs=3"), Error);
  CHECK_THROWS_AS(SegmentationSpec::parse("slic:n_segments=abc"), Error);
}

TEST_CASE("label map container round-trips and validates") {
  std::vector<LabelMap> maps{per_pixel(2, 3), slic(blocky_image(8, 8, 1), SlicParams{4, 10, 10, true})};
  auto bytes = encode_label_maps(maps);
  CHECK(bytes.size() == 12 + (8 + 6 * 4) + (8 + 64 * 4));
  auto back = decode_label_maps(bytes);
  CHECK(back == maps);
  CHECK(encode_label_maps(back) == bytes);
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_label_maps(bad), Error);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_label_maps(bad), Error);
  bad = bytes;
  bad[12 + 4] = 9;  // segment_count of the first map no longer matches its labels
  CHECK_THROWS_AS(decode_label_maps(bad), Error);
}
