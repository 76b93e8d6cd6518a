#include <algorithm>
#include <cstring>
#include <numeric>

#include <nlohmann/json.hpp>

#include "internal/rng.hpp"
#include "segloo/attacks.hpp"
#include "segloo/data.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/nn.hpp"

namespace segloo::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

FileRef file_ref(const fs::path& path) { return {path, io::file_checksum(path)}; }

namespace {

json ref_json(const FileRef& r) { return {{"path", r.path.generic_string()}, {"checksum", r.checksum}}; }
FileRef ref_from(const json& j) { return {fs::path(j.at("path").get<std::string>()), j.at("checksum").get<std::string>()}; }

}  // namespace

std::string Manifest::to_json() const {
  json j;
  j["format"] = "segloo-manifest";
  j["version"] = 1;
  j["attack"] = attack;
  j["batch_count"] = batch_count;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["split_seed"] = split_seed;
  j["segmentation"] = segmentation;
  j["modes"] = modes;
  j["successful_only"] = successful_only;
  j["correct_only"] = correct_only;
  j["arch"] = ref_json(arch);
  j["weights"] = ref_json(weights);
  j["images"] = json::array();
  for (const auto& r : images) j["images"].push_back(ref_json(r));
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json(const std::string& text, const fs::path& base_dir) {
  Manifest m;
  m.base_dir = base_dir;
  try {
    const json j = json::parse(text);
    require(j.value("format", "") == "segloo-manifest", ErrorKind::kFormat, "not a manifest file");
    require(j.at("version").get<int>() == 1, ErrorKind::kFormat, "unsupported manifest version");
    m.attack = j.value("attack", m.attack);
    m.batch_count = j.value("batch_count", m.batch_count);
    m.batch_size = j.value("batch_size", m.batch_size);
    m.seed = j.value("seed", m.seed);
    m.split_seed = j.value("split_seed", m.split_seed);
    m.segmentation = j.value("segmentation", m.segmentation);
    m.modes = j.value("modes", m.modes);
    m.successful_only = j.value("successful_only", false);
    m.correct_only = j.value("correct_only", false);
    m.arch = ref_from(j.at("arch"));
    m.weights = ref_from(j.at("weights"));
    for (const auto& r : j.at("images")) m.images.push_back(ref_from(r));
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("bad manifest: ") + e.what());
  }
  require(m.batch_count >= 1 && m.batch_size >= 1, ErrorKind::kConfig, "manifest needs batch_count and batch_size >= 1");
  require(!m.images.empty(), ErrorKind::kConfig, "manifest lists no image files");
  return m;
}

Manifest Manifest::load(const fs::path& path) {
  return from_json(io::read_text(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

void Manifest::save(const fs::path& path) const { io::write_text_atomic(path, to_json()); }

fs::path Manifest::resolve(const fs::path& p) const { return p.is_absolute() || base_dir.empty() ? p : base_dir / p; }

void Manifest::verify() const {
  std::vector<const FileRef*> refs{&arch, &weights};
  for (const auto& r : images) refs.push_back(&r);
  for (const auto* r : refs) {
    const auto path = resolve(r->path);
    require(fs::exists(path), ErrorKind::kData, "missing input " + path.string() + " (expected checksum " + r->checksum + ")");
    const auto actual = io::file_checksum(path);
    require(actual == r->checksum, ErrorKind::kData,
            "checksum mismatch for " + path.string() + ": expected " + r->checksum + ", found " + actual);
  }
}

std::string Experiment::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) { h = io::fnv1a64({static_cast<const std::uint8_t*>(p), n}, h); };
  for (const ImageBatch* b : {&benign, &adversarial}) {
    mix(b->images.data(), b->images.size() * sizeof(float));
    mix(b->labels.data(), b->labels.size() * sizeof(int));
    for (const auto& id : b->ids) mix(id.data(), id.size() + 1);
  }
  const auto m = meta.to_json();
  mix(m.data(), m.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Experiment assemble_experiment(const Manifest& manifest, int workers) {
  manifest.verify();
  const auto arch = nn::ArchConfig::load(manifest.resolve(manifest.arch.path));
  const auto net = nn::load_weights(manifest.resolve(manifest.weights.path), arch);
  auto params = attack::AttackParams::parse(manifest.attack);

  std::vector<ImageBatch> parts;
  for (const auto& r : manifest.images) {
    const auto path = manifest.resolve(r.path);
    parts.push_back(read_cifar_file(path, path.stem().string()));
  }
  const ImageBatch pool = ImageBatch::concat(parts);
  const std::size_t needed = manifest.batch_count * manifest.batch_size;

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  detail::Rng rng(manifest.seed);
  rng.shuffle(order);
  std::vector<std::size_t> chosen;
  if (!manifest.correct_only) {
    require(pool.size() >= needed, ErrorKind::kData,
            "manifest asks for " + std::to_string(needed) + " images but the files hold " + std::to_string(pool.size()));
    chosen.assign(order.begin(), order.begin() + needed);
  } else {
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < order.size() && chosen.size() < needed; start += kChunk) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(kChunk, order.size() - start));
      const auto sub = pool.subset(idx);
      const auto probs = net.forward(sub.images).probs;
      for (std::size_t k = 0; k < idx.size() && chosen.size() < needed; ++k)
        if (nn::argmax(probs.item(k)) == sub.labels[k]) chosen.push_back(idx[k]);
    }
    require(chosen.size() == needed, ErrorKind::kData,
            "only " + std::to_string(chosen.size()) + " correctly classified images available, manifest asks for " +
                std::to_string(needed));
  }

  Experiment exp;
  exp.benign = pool.subset(chosen);
  exp.meta.attack = params.to_string();
  exp.meta.seed = manifest.seed;
  std::vector<ImageBatch> adv_parts;
  for (std::size_t b = 0; b < manifest.batch_count; ++b) {
    std::vector<std::size_t> idx(manifest.batch_size);
    std::iota(idx.begin(), idx.end(), b * manifest.batch_size);
    const auto batch = exp.benign.subset(idx);
    auto p = params;
    p.epsilons = {params.epsilons[b * params.epsilons.size() / manifest.batch_count]};
    p.seed = detail::mix_seed(manifest.seed ^ params.seed, b);
    const auto result = attack::attack_batch(net, batch.images, batch.labels, p, workers);
    ImageBatch adv;
    adv.images = result.adversarial_batch();
    adv.labels = batch.labels;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& r = result.results[i];
      adv.ids.push_back("adv:" + batch.ids[i]);
      exp.meta.epsilons.push_back(r.epsilon);
      exp.meta.success.push_back(r.success);
      exp.meta.sources.push_back(batch.ids[i]);
      exp.meta.original_class.push_back(r.original_class);
      exp.meta.adversarial_class.push_back(r.adversarial_class);
    }
    adv_parts.push_back(std::move(adv));
  }
  exp.adversarial = ImageBatch::concat(adv_parts);

  if (manifest.successful_only) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < exp.meta.success.size(); ++i)
      if (exp.meta.success[i]) keep.push_back(i);
    exp.benign = exp.benign.subset(keep);
    exp.adversarial = exp.adversarial.subset(keep);
    AdversarialMeta m;
    m.attack = exp.meta.attack;
    m.seed = exp.meta.seed;
    for (auto i : keep) {
      m.epsilons.push_back(exp.meta.epsilons[i]);
      m.success.push_back(true);
      m.sources.push_back(exp.meta.sources[i]);
      m.original_class.push_back(exp.meta.original_class[i]);
      m.adversarial_class.push_back(exp.meta.adversarial_class[i]);
    }
    exp.meta = std::move(m);
  }
  return exp;
}

det::FeatureDataset feature_dataset(const Experiment& exp, std::span<const std::vector<float>> benign_features,
                                    std::span<const std::vector<float>> adversarial_features,
                                    const std::string& provenance) {
  require(benign_features.size() == exp.benign.size() && adversarial_features.size() == exp.adversarial.size(),
          ErrorKind::kData, "feature count does not match the experiment");
  det::FeatureDataset ds;
  ds.provenance = provenance;
  for (std::size_t i = 0; i < exp.benign.size(); ++i)
    ds.rows.push_back({exp.benign.ids[i], exp.benign.ids[i], "none", 0.0, det::kBenign, benign_features[i]});
  for (std::size_t i = 0; i < exp.adversarial.size(); ++i)
    ds.rows.push_back({exp.adversarial.ids[i], exp.meta.sources[i], exp.meta.attack, exp.meta.epsilons[i], det::kAdversarial,
                       adversarial_features[i]});
  ds.validate();
  return ds;
}

}  // namespace segloo::data
