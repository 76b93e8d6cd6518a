#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "internal/rng.hpp"
#include "segloo/attribution.hpp"
#include "segloo/error.hpp"

using namespace segloo;
using namespace segloo::attr;

namespace {

nn::LayerSpec layer(nn::LayerKind kind) {
  nn::LayerSpec l;
  l.kind = kind;
  return l;
}

nn::LayerSpec dense(int in, int out) {
  auto l = layer(nn::LayerKind::kDense);
  l.in_features = in;
  l.out_features = out;
  return l;
}

nn::Network desk_net(std::uint64_t seed = 1) {
  return nn::Network::build(nn::ArchConfig::load(SEGLOO_SOURCE_DIR "/configs/desk_cnn.json"), seed);
}

Tensor random_images(int n, std::uint64_t seed, int h = 32, int w = 32) {
  detail::Rng rng(seed);
  Tensor t({n, 3, h, w});
  for (float& v : t.values()) v = static_cast<float>(rng.uniform());
  return t;
}

// Smallest value v in the list with count(<= v) / N >= p, by scanning every candidate.
float scan_quantile(const std::vector<float>& values, double p) {
  float best = INFINITY;
  for (float v : values) {
    const auto count = std::count_if(values.begin(), values.end(), [&](float u) { return u <= v; });
    if (static_cast<double>(count) / values.size() >= p) best = std::min(best, v);
  }
  return best;
}

}  // namespace

TEST_CASE("empirical quantile examples") {
  const std::vector<float> eight{1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(empirical_quantile(eight, 0.25) == 2.0f);
  CHECK(empirical_quantile(eight, 0.75) == 6.0f);
  CHECK(iqr(eight) == 4.0f);
  const std::vector<float> shuffled{8, 3, 5, 1, 7, 2, 6, 4};
  CHECK(iqr(shuffled) == 4.0f);
  const std::vector<float> constant(9, 2.5f);
  for (double p : {0.0, 0.1, 0.5, 0.99, 1.0}) CHECK(empirical_quantile(constant, p) == 2.5f);
  CHECK(iqr(constant) == 0.0f);
  const std::vector<float> single{3.25f};
  for (double p : {0.0, 0.3, 1.0}) CHECK(empirical_quantile(single, p) == 3.25f);
  CHECK_THROWS_AS(empirical_quantile(std::vector<float>{}, 0.5), Error);
  CHECK_THROWS_AS(iqr(std::vector<float>{}), Error);
  CHECK_THROWS_AS(empirical_quantile(eight, 1.5), Error);
}

TEST_CASE("empirical quantile matches the scan oracle on random lists") {
  detail::Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<float> values(n);
    const bool ties = trial % 3 == 0;
    for (auto& v : values) v = ties ? static_cast<float>(rng.below(5)) : static_cast<float>(rng.normal());
    for (double p : {0.0, 0.25, 0.5, 0.75, 1.0, rng.uniform()}) {
      REQUIRE(empirical_quantile(values, p) == scan_quantile(values, p));
    }
    CHECK(iqr(values) == scan_quantile(values, 0.75) - scan_quantile(values, 0.25));
  }
}

TEST_CASE("IQR scales with a non-negative factor") {
  detail::Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> values(1 + rng.below(40));
    for (auto& v : values) v = static_cast<float>(std::fabs(rng.normal()));
    const float alpha = trial == 0 ? 0.0f : static_cast<float>(std::ldexp(1.0, static_cast<int>(rng.below(9)) - 4));
    std::vector<float> scaled = values;
    for (auto& v : scaled) v *= alpha;
    CHECK(iqr(scaled) == alpha * iqr(values));
  }
}

TEST_CASE("iqr_vector reduces each column") {
  AttributionMatrix m{0, 8, 2, {}};
  for (int i = 0; i < 8; ++i) {
    m.values.push_back(static_cast<float>(8 - i));
    m.values.push_back(1.0f);
  }
  CHECK(iqr_vector(m) == std::vector<float>{4.0f, 0.0f});
  CHECK_THROWS_AS(iqr_vector(AttributionMatrix{}), Error);
}

TEST_CASE("tap selection modes") {
  auto net = desk_net();
  CHECK(select_taps(net, TapSpec::parse("output")).dimension() == 10);
  CHECK(select_taps(net, TapSpec::parse("1d")).dimension() == 1);
  auto spec = TapSpec::parse("multilayer:per_layer=50,last_layers=8,seed=7");
  CHECK(spec.per_layer_count == 50);
  CHECK(spec.last_n_layers == 8);
  CHECK(spec.seed == 7);
  CHECK(TapSpec::parse(spec.to_string()).to_string() == spec.to_string());
  auto a = select_taps(net, spec);
  CHECK(a == select_taps(net, spec));
  spec.seed = 8;
  CHECK_FALSE(a == select_taps(net, spec));

  std::set<std::pair<int, std::uint32_t>> seen;
  for (const auto& e : a.entries) {
    CHECK(seen.insert({e.layer, e.index}).second);
    CHECK(e.index < net.layer_node_count(e.layer));
    CHECK(net.arch().layers[e.layer].kind != nn::LayerKind::kFlatten);
  }
  CHECK(a.layers().size() == 8);

  CHECK_THROWS_AS(select_taps(net, TapSpec::parse("multilayer:last_layers=13")), Error);
  CHECK_THROWS_AS(select_taps(net, TapSpec::parse("multilayer:last_layers=0")), Error);
  CHECK_THROWS_AS(TapSpec::parse("hidden"), Error);
  CHECK_THROWS_AS(TapSpec::parse("output:seed=3"), Error);
}

TEST_CASE("short layers contribute all nodes: 19 x 200 + 10 = 3810") {
  nn::ArchConfig arch;
  arch.input_shape = {3, 8, 8};
  arch.class_count = 10;
  arch.layers.push_back(layer(nn::LayerKind::kFlatten));
  arch.layers.push_back(dense(192, 256));
  arch.layers.push_back(layer(nn::LayerKind::kRelu));
  for (int i = 0; i < 8; ++i) {
    arch.layers.push_back(dense(256, 256));
    arch.layers.push_back(layer(nn::LayerKind::kRelu));
  }
  arch.layers.push_back(dense(256, 200));
  arch.layers.push_back(dense(200, 10));
  arch.layers.push_back(layer(nn::LayerKind::kSoftmax));
  auto net = nn::Network::build(arch, 3);
  auto taps = select_taps(net, TapSpec::parse("multilayer:per_layer=200,last_layers=20,seed=1"));
  CHECK(taps.dimension() == 3810);
  CHECK(taps.layers().size() == 20);
}

TEST_CASE("occlude blacks out one segment in every channel") {
  Tensor img({3, 2, 2}, 0.5f);
  auto map = seg::per_pixel(2, 2);
  auto out = occlude(img, map, 0);
  for (int c = 0; c < 3; ++c) {
    CHECK(out[c * 4] == 0.0f);
    for (int p = 1; p < 4; ++p) CHECK(out[c * 4 + p] == 0.5f);
  }
  CHECK(occlude(out, map, 0) == out);
  CHECK_THROWS_AS(occlude(img, map, 4), Error);
  CHECK_THROWS_AS(occlude(img, seg::per_pixel(3, 2), 0), Error);

  auto photo = random_images(1, 3, 16, 16).item_tensor(0).reshaped({3, 16, 16});
  auto slic = seg::slic(photo, seg::SlicParams{10, 10, 10, true});
  std::size_t zeroed = 0;
  for (int s = 0; s < slic.segment_count; ++s) {
    auto o = occlude(photo, slic, s);
    for (std::size_t p = 0; p < 256; ++p) zeroed += o[p] == 0.0f && o[256 + p] == 0.0f && o[512 + p] == 0.0f;
  }
  CHECK(zeroed == 256);
}

TEST_CASE("zero-weight network has zero attributions") {
  auto net = desk_net();
  for (auto* t : net.all_params()) std::fill(t->values().begin(), t->values().end(), 0.0f);
  auto img = random_images(1, 2);
  std::vector<TapSet> taps{select_taps(net, TapSpec::parse("1d")), select_taps(net, TapSpec::parse("output")),
                           select_taps(net, TapSpec::parse("multilayer:per_layer=20,last_layers=6"))};
  auto map = seg::slic(img.item_tensor(0), seg::SlicParams{32, 10, 10, true});
  for (const auto& m : loo_attributions(net, img, map, taps)) {
    for (float v : m.values) CHECK(v == 0.0f);
  }
}

TEST_CASE("linear model: attribution of a pixel equals its logit contribution") {
  nn::ArchConfig arch;
  arch.input_shape = {3, 2, 2};
  arch.class_count = 3;
  arch.layers = {layer(nn::LayerKind::kFlatten), dense(12, 3)};
  auto net = nn::Network::build(arch, 9);
  auto& bias = net.layer_params(1)[1];
  bias[0] = 0.3f;
  bias[2] = -1.0f;
  const Tensor& w = net.layer_params(1)[0];
  auto img = random_images(1, 4, 2, 2);
  auto taps = select_taps(net, TapSpec::parse("multilayer:per_layer=3,last_layers=1"));
  REQUIRE(taps.dimension() == 3);
  PassCounter counter;
  auto m = loo_attributions(net, img, seg::per_pixel(2, 2), taps, LooOptions{32, &counter});
  CHECK(counter.value() == 5);
  REQUIRE(m.occlusions == 4);
  for (int p = 0; p < 4; ++p) {
    for (int l = 0; l < 3; ++l) {
      double contribution = 0.0;
      for (int c = 0; c < 3; ++c) contribution += double(w[l * 12 + c * 4 + p]) * img[c * 4 + p];
      CHECK(m.at(p, l) == doctest::Approx(std::fabs(contribution)).epsilon(1e-5));
    }
  }
}

TEST_CASE("forward-pass budget and chunking") {
  auto net = desk_net(4);
  auto img = random_images(1, 6).item_tensor(0);
  auto taps = select_taps(net, TapSpec::parse("multilayer:per_layer=30,last_layers=10,seed=2"));
  PassCounter counter;
  auto map = seg::per_pixel(32, 32);
  auto whole = loo_attributions(net, img, map, taps, LooOptions{64, &counter});
  CHECK(counter.value() == 1025);
  for (int chunk : {1, 7, 2000}) {
    auto other = loo_attributions(net, img, map, taps, LooOptions{chunk, nullptr});
    CHECK(other.values == whole.values);
  }
  for (float v : whole.values) CHECK(v >= 0.0f);

  PassCounter slic_counter;
  auto slic = seg::slic(img, seg::SlicParams{32, 10, 10, true});
  loo_attributions(net, img, slic, taps, LooOptions{32, &slic_counter});
  CHECK(slic_counter.value() == static_cast<std::uint64_t>(slic.segment_count) + 1);
  CHECK(slic_counter.value() <= 33);
}

TEST_CASE("several tap sets share one set of passes") {
  auto net = desk_net(5);
  auto img = random_images(1, 8).item_tensor(0);
  std::vector<TapSet> taps{select_taps(net, TapSpec::parse("1d")), select_taps(net, TapSpec::parse("output")),
                           select_taps(net, TapSpec::parse("multilayer:per_layer=40,last_layers=12,seed=3"))};
  auto map = seg::slic(img, seg::SlicParams{64, 10, 10, true});
  PassCounter shared;
  auto together = loo_attributions(net, img, map, taps, LooOptions{32, &shared});
  CHECK(shared.value() == static_cast<std::uint64_t>(map.segment_count) + 1);
  for (std::size_t t = 0; t < taps.size(); ++t) {
    auto alone = loo_attributions(net, img, map, taps[t]);
    CHECK(alone.values == together[t].values);
    CHECK(alone.taps == taps[t].dimension());
  }
  // 1-D column is the predicted-class entry of the output-layer matrix
  const auto& out = together[1];
  const int c = nn::argmax(net.forward(img.reshaped({1, 3, 32, 32})).probs.item(0));
  for (std::size_t i = 0; i < out.occlusions; ++i) CHECK(together[0].at(i, 0) == out.at(i, c));
}

TEST_CASE("extract_features: batch path equals the per-image path") {
  auto net = desk_net(6);
  auto batch = random_images(5, 10);
  std::vector<TapSet> taps{select_taps(net, TapSpec::parse("1d")),
                           select_taps(net, TapSpec::parse("multilayer:per_layer=25,last_layers=5,seed=1"))};
  const auto spec = seg::SegmentationSpec::parse("slic:n_segments=32");
  PassCounter counter;
  auto result = extract_features(net, batch, spec, taps, ExtractOptions{3, 16, true, &counter});
  std::uint64_t expected_passes = 0, expected_bytes = 0;
  for (int i = 0; i < 5; ++i) {
    const auto image = batch.item_tensor(i);
    const auto map = seg::segment(image, spec);
    CHECK(result.segment_counts[i] == map.segment_count);
    expected_passes += map.segment_count + 1;
    for (std::size_t t = 0; t < taps.size(); ++t) {
      const auto m = loo_attributions(net, image, map, taps[t]);
      expected_bytes += m.byte_size();
      CHECK(result.matrices[t][i].values == m.values);
      CHECK(result.vectors[t][i].values == iqr_vector(m));
      CHECK(result.vectors[t][i].image_id == static_cast<std::size_t>(i));
    }
  }
  CHECK(counter.value() == expected_passes);
  CHECK(result.attribution_bytes == expected_bytes);

  auto single = extract_features(net, batch, spec, taps, ExtractOptions{1, 32, false, nullptr});
  for (std::size_t t = 0; t < taps.size(); ++t)
    for (int i = 0; i < 5; ++i) CHECK(single.vectors[t][i].values == result.vectors[t][i].values);
  CHECK(single.matrices.empty());
}

TEST_CASE("extract_features: per-pixel 1-D uses 1024 attributions and differs from SLIC") {
  auto net = desk_net(7);
  auto batch = random_images(1, 12);
  std::vector<TapSet> taps{select_taps(net, TapSpec::parse("1d"))};
  auto fine = extract_features(net, batch, seg::SegmentationSpec::parse("per-pixel"), taps,
                               ExtractOptions{1, 64, true, nullptr});
  CHECK(fine.matrices[0][0].occlusions == 1024);
  CHECK(fine.vectors[0][0].values.size() == 1);
  CHECK(fine.attribution_bytes == 1024 * 4);
  auto coarse = extract_features(net, batch, seg::SegmentationSpec::parse("slic:n_segments=32"), taps);
  CHECK(coarse.vectors[0][0].values != fine.vectors[0][0].values);

  std::vector<seg::LabelMap> wrong(2, seg::per_pixel(32, 32));
  CHECK_THROWS_AS(extract_features(net, batch, seg::SegmentationSpec{}, taps, {}, wrong), Error);
}

TEST_CASE("provenance round-trips") {
  Provenance p{"slic:n_segments=64,compactness=10,max_iter=10,enforce_connectivity=1", "output", 7, "0123456789abcdef"};
  auto back = Provenance::from_json(p.to_json());
  CHECK(back.segmentation == p.segmentation);
  CHECK(back.taps == p.taps);
  CHECK(back.seed == 7);
  CHECK(back.weights_checksum == p.weights_checksum);
  CHECK_THROWS_AS(Provenance::from_json("{\"taps\": 1}"), Error);
}
