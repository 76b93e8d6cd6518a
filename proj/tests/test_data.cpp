#include <doctest.h>

#include <functional>
#include <set>

#include "internal/rng.hpp"
#include "segloo/data.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/nn.hpp"
#include "temp_dir.hpp"

using namespace segloo;
using namespace segloo::data;
namespace fs = std::filesystem;

namespace {

bool has_message(const std::function<void()>& f, const std::string& needle) {
  try {
    f();
  } catch (const Error& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

det::FeatureDataset small_features(std::size_t d) {
  det::FeatureDataset ds;
  ds.provenance = "{\n  \"taps\": \"output\"\n}\n";
  for (int i = 0; i < 6; ++i) {
    det::FeatureRow r{"img" + std::to_string(i), "test:" + std::to_string(i), i % 2 ? "fgsm:eps=0.02,0.06,0.1" : "none",
                      i % 2 ? 0.06 : 0.0, i % 2, {}};
    for (std::size_t j = 0; j < d; ++j) r.features.push_back(static_cast<float>(1.0 / (i + j + 3)) * (j % 3 ? 1.0f : 1e-7f));
    ds.rows.push_back(r);
  }
  return ds;
}

// Random desk-scale network and a pool of synthetic images written to `dir`.
Manifest tiny_manifest(const fs::path& dir) {
  auto arch = nn::ArchConfig::load(SEGLOO_SOURCE_DIR "/configs/desk_cnn.json");
  io::write_text_atomic(dir / "arch.json", arch.to_json());
  nn::save_weights(nn::Network::build(arch, 3), dir / "weights.sfw");
  write_cifar_file(dir / "pool.bin", synth_batch(40, 9, "pool"));
  Manifest m;
  m.base_dir = dir;
  m.attack = "fgsm:eps=0.02,0.06,0.1";
  m.batch_count = 3;
  m.batch_size = 4;
  m.seed = 17;
  m.arch = {"arch.json", io::file_checksum(dir / "arch.json")};
  m.weights = {"weights.sfw", io::file_checksum(dir / "weights.sfw")};
  m.images = {{"pool.bin", io::file_checksum(dir / "pool.bin")}};
  return m;
}

}  // namespace

TEST_CASE("cifar records: decode, encode and exact byte normalization") {
  std::vector<std::uint8_t> bytes(2 * kCifarRecordBytes);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 7 % 256);
  bytes[0] = 3;
  bytes[kCifarRecordBytes] = 9;
  auto b = decode_cifar(bytes, "t");
  REQUIRE(b.size() == 2);
  CHECK(b.labels == std::vector<int>{3, 9});
  CHECK(b.ids[1] == "t:1");
  CHECK(b.images[0] == bytes[1] / 255.0f);
  CHECK(b.images[3072 + 1023] == bytes[kCifarRecordBytes + 1024] / 255.0f);  // last red pixel of image 1
  CHECK(encode_cifar(b) == bytes);
  for (int v = 0; v < 256; ++v) CHECK(std::lround(static_cast<float>(v) / 255.0f * 255.0f) == v);

  TempDir dir("cifar_rt");
  write_cifar_file(dir / "b.bin", b);
  CHECK(io::read_bytes(dir / "b.bin") == bytes);
  auto back = read_cifar_file(dir / "b.bin", "t");
  CHECK(back.images == b.images);
}

TEST_CASE("cifar errors name the offset") {
  std::vector<std::uint8_t> bytes(kCifarRecordBytes + 3072, 0);
  CHECK(has_message([&] { decode_cifar(bytes, "f"); }, "offset 3073"));
  std::vector<std::uint8_t> bad(2 * kCifarRecordBytes, 0);
  bad[kCifarRecordBytes] = 10;
  CHECK(has_message([&] { decode_cifar(bad, "f"); }, "label 10 at offset 3073"));
  TempDir dir("cifar_err");
  CHECK_THROWS_AS(locate_cifar10(dir.path), Error);
}

TEST_CASE("image batch subset and concat") {
  auto b = synth_batch(6, 1, "s");
  std::vector<std::size_t> idx{4, 1};
  auto sub = b.subset(idx);
  CHECK(sub.ids == std::vector<std::string>{"s:4", "s:1"});
  CHECK(sub.images.item_tensor(0) == b.images.item_tensor(4));
  std::vector<ImageBatch> parts{sub, b};
  auto all = ImageBatch::concat(parts);
  CHECK(all.size() == 8);
  CHECK(all.images.item_tensor(2) == b.images.item_tensor(0));
  all.validate();
}

TEST_CASE("synthetic CIFAR-format files") {
  TempDir dir("synth");
  SynthParams p;
  p.train_per_file = 20;
  p.test_records = 10000;
  p.seed = 5;
  auto files = write_synthetic_cifar(dir.path, p);
  CHECK(fs::file_size(files.test) == 10000 * kCifarRecordBytes);
  auto split = load_cifar10(dir.path);
  CHECK(split.test.size() == 10000);
  CHECK(split.train.size() == 100);
  CHECK(split.train.ids[20] == "train2:0");
  std::set<int> classes(split.test.labels.begin(), split.test.labels.end());
  CHECK(classes.size() == 10);
  auto first = synth_batch(20, detail::mix_seed(5, 1), "train1");
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  CHECK(split.train.subset(idx).images == first.images);
  CHECK(synth_batch(20, 3, "a").images == synth_batch(20, 3, "a").images);
  CHECK_FALSE(synth_batch(20, 3, "a").images == synth_batch(20, 4, "a").images);
}

TEST_CASE("feature CSV: columns, exact round-trip, sidecar") {
  auto ds = small_features(10);
  const auto text = features_csv(ds);
  const auto header = text.substr(0, text.find('\n'));
  CHECK(std::count(header.begin(), header.end(), ',') + 1 == 15);
  CHECK(header == "image_id,source,attack,epsilon,label,f0,f1,f2,f3,f4,f5,f6,f7,f8,f9");
  auto back = parse_features_csv(text);
  REQUIRE(back.rows.size() == ds.rows.size());
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    CHECK(back.rows[i].features == ds.rows[i].features);
    CHECK(back.rows[i].attack == ds.rows[i].attack);
    CHECK(back.rows[i].epsilon == ds.rows[i].epsilon);
    CHECK(back.rows[i].label == ds.rows[i].label);
  }
  CHECK(features_csv(back) == text);

  TempDir dir("features");
  write_features(dir / "f.csv", ds);
  CHECK(fs::exists(provenance_path(dir / "f.csv")));
  auto loaded = read_features(dir / "f.csv");
  CHECK(loaded.provenance == ds.provenance);
  CHECK(features_csv(loaded) == text);

  CHECK_THROWS_AS(parse_features_csv("image_id,source,attack,epsilon,flag,f0\n"), Error);
  CHECK_THROWS_AS(parse_features_csv("image_id,source,attack,epsilon,label,f0\na,b,c,0,maybe,1\n"), Error);
  CHECK_THROWS_AS(parse_features_csv("image_id,source,attack,epsilon,label,f0\na,b,c,0,benign\n"), Error);
}

TEST_CASE("report CSV") {
  CHECK(report_csv({}) == "attack,segmentation,mode,detector,dimension,auc,accuracy,test_count,benign,adversarial\n");
  std::vector<ReportRow> rows{
      {"fgsm:eps=0.02,0.06,0.1", "slic:n_segments=64,compactness=10", "output", "gbt", 10, 0.8125, 0.75, 400, 200, 200},
      {"pgd:eps=0.1", "per-pixel", "multilayer:per_layer=50,last_layers=8,seed=7", "logistic", 400, 1.0 / 3.0, 0.1, 10, 5, 5}};
  const auto text = report_csv(rows);
  CHECK(parse_report_csv(text) == rows);
  CHECK(report_csv(parse_report_csv(text)) == text);
  TempDir dir("report");
  write_report(dir / "r.csv", rows);
  CHECK(read_report(dir / "r.csv") == rows);
  write_report(dir / "empty.csv", {});
  CHECK(read_report(dir / "empty.csv").empty());
  CHECK_THROWS_AS(parse_report_csv("a,b\n"), Error);
}

TEST_CASE("adversarial batch files") {
  TempDir dir("adv");
  auto b = synth_batch(3, 2, "test");
  AdversarialMeta m{"fgsm:eps=0.1", {0.1, 0.1, 0.1}, 4, {true, false, true}, b.ids, {1, 2, 3}, {4, 2, 5}};
  write_adversarial(dir / "adv.bin", b, m);
  auto [batch, meta] = read_adversarial(dir / "adv.bin");
  CHECK(batch.images == b.images);
  CHECK(batch.ids == b.ids);
  CHECK(meta.to_json() == m.to_json());
  CHECK(AdversarialMeta::from_json(m.to_json()).success == m.success);
}

TEST_CASE("manifest round-trip and checksum verification") {
  TempDir dir("manifest");
  auto m = tiny_manifest(dir.path);
  m.save(dir / "m.json");
  auto back = Manifest::load(dir / "m.json");
  CHECK(back.to_json() == m.to_json());
  back.verify();
  io::write_text_atomic(dir / "arch.json", "{}");
  CHECK(has_message([&] { back.verify(); }, "expected " + m.arch.checksum));
  auto fresh = tiny_manifest(dir.path);
  fresh.verify();
  fs::remove(dir / "pool.bin");
  CHECK(has_message([&] { fresh.verify(); }, "missing input"));
}

TEST_CASE("assemble_experiment: pairing, epsilon thirds, determinism") {
  TempDir dir("assemble");
  auto m = tiny_manifest(dir.path);
  auto exp = assemble_experiment(m);
  CHECK(exp.benign.size() == 12);
  CHECK(exp.adversarial.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const double expected = i < 4 ? 0.02 : (i < 8 ? 0.06 : 0.1);
    CHECK(exp.meta.epsilons[i] == expected);
    CHECK(exp.meta.sources[i] == exp.benign.ids[i]);
    CHECK(exp.adversarial.ids[i] == "adv:" + exp.benign.ids[i]);
    CHECK(exp.adversarial.labels[i] == exp.benign.labels[i]);
  }
  std::set<std::string> ids(exp.benign.ids.begin(), exp.benign.ids.end());
  CHECK(ids.size() == 12);
  CHECK(assemble_experiment(m).checksum() == exp.checksum());
  auto other = m;
  other.seed = 18;
  CHECK(assemble_experiment(other).checksum() != exp.checksum());

  auto succ = m;
  succ.successful_only = true;
  auto filtered = assemble_experiment(succ);
  for (bool s : filtered.meta.success) CHECK(s);
  CHECK(filtered.benign.size() == filtered.adversarial.size());
  CHECK(filtered.benign.size() == static_cast<std::size_t>(std::count(exp.meta.success.begin(), exp.meta.success.end(), true)));

  auto too_many = m;
  too_many.batch_size = 100;
  CHECK_THROWS_AS(assemble_experiment(too_many), Error);

  std::vector<std::vector<float>> bf(12, std::vector<float>{1.0f, 2.0f}), af(12, std::vector<float>{3.0f, 4.0f});
  auto ds = feature_dataset(exp, bf, af, "{}");
  CHECK(ds.rows.size() == 24);
  CHECK(ds.count(det::kAdversarial) == 12);
  CHECK(ds.rows[12].source == exp.benign.ids[0]);
  CHECK(ds.rows[12].epsilon == 0.02);
}
