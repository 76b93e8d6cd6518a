#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

#include "desk_arch.hpp"
#include "internal/csv.hpp"
#include "segloo/attacks.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/pipeline.hpp"

namespace segloo::pipeline {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStages[] = {"synth-data", "train-model", "attack",   "segment", "extract",
                                   "train-detector", "evaluate", "bench", "report"};

json strings(std::initializer_list<const char*> v) {
  json a = json::array();
  for (const char* s : v) a.push_back(s);
  return a;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' || c == '-';
    out += keep ? c : '_';
  }
  return out;
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

fs::path out_dir(const json& c) {
  const auto out = c.at("out").get<std::string>();
  require(!out.empty(), ErrorKind::kConfig, "no output directory given (out)");
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec, ErrorKind::kIo, "cannot create output directory " + out + ": " + ec.message());
  return out;
}

fs::path input_path(const json& c, const char* key) {
  const auto p = c.at(key).get<std::string>();
  require(!p.empty(), ErrorKind::kConfig, std::string("no '") + key + "' path given");
  return p;
}

// Stage records are <stage>.provenance.json files listing each output's checksum; a consumer
// checks any file it reads against the record of the stage that produced it.
std::string expected_checksum(const fs::path& file) {
  const auto dir = file.parent_path().empty() ? fs::path(".") : file.parent_path();
  const auto name = file.filename().string();
  for (const char* stage : kStages) {
    const auto rec = dir / (std::string(stage) + ".provenance.json");
    if (!fs::exists(rec)) continue;
    json j;
    try {
      j = json::parse(io::read_text(rec));
    } catch (const json::exception& e) {
      fail(ErrorKind::kData, rec.string() + ": " + e.what());
    }
    if (j.contains("outputs") && j["outputs"].contains(name)) return j["outputs"][name].get<std::string>();
  }
  return {};
}

fs::path checked(const fs::path& file) {
  const auto want = expected_checksum(file);
  if (!fs::exists(file)) {
    fail(ErrorKind::kData,
         "missing input " + file.string() + (want.empty() ? std::string() : " (expected checksum " + want + ")"));
  }
  if (!want.empty()) {
    const auto have = io::file_checksum(file);
    require(have == want, ErrorKind::kData,
            "checksum mismatch for " + file.string() + ": expected " + want + ", found " + have);
  }
  return file;
}

json finish(const fs::path& out, const std::string& stage, const json& config, const std::vector<fs::path>& outputs,
            json summary) {
  json files = json::object();
  for (const auto& p : outputs) files[fs::relative(p, out).generic_string()] = io::file_checksum(p);
  summary["stage"] = stage;
  summary["outputs"] = files;
  json rec{{"stage", stage}, {"config", config}, {"outputs", files}, {"summary", summary}};
  io::write_text_atomic(out / (stage + ".provenance.json"), rec.dump(2) + "\n");
  return summary;
}

struct Model {
  nn::Network net;
  std::string weights_checksum;
  fs::path arch_path, weights_path;
};

Model load_model(const fs::path& dir) {
  const auto arch_path = checked(dir / "arch.json");
  const auto weights_path = checked(dir / "weights.sfw");
  return {nn::load_weights(weights_path, nn::ArchConfig::load(arch_path)), io::file_checksum(weights_path), arch_path,
          weights_path};
}

data::Experiment load_experiment(const fs::path& dir) {
  data::Experiment exp;
  exp.benign = data::read_image_batch(checked(dir / "benign.sfi"));
  exp.adversarial = data::read_image_batch(checked(dir / "adversarial.sfi"));
  exp.meta = data::AdversarialMeta::from_json(io::read_text(checked(dir / "adversarial.bin.json")));
  require(exp.adversarial.size() == exp.benign.size() && exp.meta.sources.size() == exp.benign.size(), ErrorKind::kData,
          dir.string() + ": benign, adversarial and metadata counts differ");
  return exp;
}

// An attack directory (benign.sfi), a CIFAR directory (test batch), or a batch file.
data::ImageBatch load_images(const fs::path& p) {
  if (fs::is_directory(p)) {
    if (fs::exists(p / "benign.sfi")) return data::read_image_batch(checked(p / "benign.sfi"));
    const auto files = data::locate_cifar10(p);
    return data::read_cifar_file(checked(files.test), "test");
  }
  checked(p);
  if (p.extension() == ".sfi") return data::read_image_batch(p);
  return data::read_cifar_file(p, p.stem().string());
}

std::vector<std::string> string_list(const json& c, const char* key) {
  auto v = c.at(key).get<std::vector<std::string>>();
  require(!v.empty(), ErrorKind::kConfig, std::string("'") + key + "' must list at least one entry");
  return v;
}

std::vector<seg::SegmentationSpec> seg_specs(const json& c) {
  std::vector<seg::SegmentationSpec> v;
  for (const auto& s : string_list(c, "segmentations")) v.push_back(seg::SegmentationSpec::parse(s));
  return v;
}

std::vector<attr::TapSpec> tap_specs(const json& c) {
  std::vector<attr::TapSpec> v;
  for (const auto& s : string_list(c, "modes")) v.push_back(attr::TapSpec::parse(s));
  return v;
}

int workers_of(const json& c) {
  const int w = c.at("workers").get<int>();
  require(w >= 1, ErrorKind::kConfig, "workers must be >= 1");
  return w;
}

double accuracy(const nn::Network& net, const data::ImageBatch& b) {
  if (b.size() == 0) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 500;
  for (std::size_t start = 0; start < b.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, b.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto sub = b.subset(idx);
    const auto probs = net.forward(sub.images).probs;
    for (std::size_t k = 0; k < idx.size(); ++k) correct += nn::argmax(probs.item(k)) == sub.labels[k];
  }
  return static_cast<double>(correct) / b.size();
}

json parse_json_object(const std::string& text, const std::string& what) {
  try {
    auto j = json::parse(text);
    if (j.is_object()) return j;
  } catch (const json::exception&) {
  }
  fail(ErrorKind::kData, what + " is not a JSON object");
}

}  // namespace

json stage_defaults(const std::string& stage) {
  const json common{{"out", ""}, {"seed", 0u}, {"workers", 1}};
  json d;
  if (stage == "synth-data") {
    d = {{"train_per_file", 10000}, {"train_files", 5}, {"test_records", 10000}};
  } else if (stage == "train-model") {
    d = {{"data", ""},   {"arch", ""},      {"epochs", 8},      {"lr", 0.01},
         {"momentum", 0.9}, {"weight_decay", 0.0}, {"batch_size", 32}, {"train_limit", 0}};
  } else if (stage == "attack") {
    d = {{"model", ""},           {"data", ""},
         {"attacks", strings({"fgsm:eps=0.02,0.06,0.1"})},
         {"batch_count", 3},      {"batch_size", 128},
         {"split_seed", 0u},      {"correct_only", true},
         {"successful_only", false}};
  } else if (stage == "segment") {
    d = {{"input", ""}, {"segmentations", strings({"slic:n_segments=64"})}};
  } else if (stage == "extract") {
    d = {{"model", ""},
         {"input", ""},
         {"segments", ""},
         {"segmentations", strings({"per-pixel"})},
         {"modes", strings({"1d", "output"})},
         {"chunk", 32}};
  } else if (stage == "train-detector") {
    d = {{"features", ""}, {"detector", "gbt"}, {"train_fraction", 0.8}, {"split_seed", 0u},
         {"trees", 100},   {"depth", 3},        {"learning_rate", 0.1},  {"subsample", 1.0},
         {"lambda", 1.0},  {"min_child_weight", 1.0}, {"logistic_lr", 0.5}, {"logistic_epochs", 300},
         {"l2", 1e-3}};
  } else if (stage == "evaluate") {
    d = {{"detector", ""}, {"features", ""}};
  } else if (stage == "bench") {
    d = {{"model", ""},
         {"input", ""},
         {"images", 128},
         {"segmentations", strings({"per-pixel", "slic:n_segments=32"})},
         {"modes", strings({"1d"})},
         {"repeats", 3},
         {"warmup", 1},
         {"chunk", 32},
         {"report", ""},
         {"detector", "gbt"}};
  } else if (stage == "report") {
    d = {{"reports", json::array()}, {"bench", ""}, {"detector", "gbt"}};
  } else {
    fail(ErrorKind::kConfig, "unknown stage '" + stage + "'");
  }
  d.update(common);
  return d;
}

json resolve_config(const std::string& stage, const json& user) {
  json c = stage_defaults(stage);
  if (user.is_null()) return c;
  require(user.is_object(), ErrorKind::kConfig, stage + ": configuration must be a JSON object");
  for (const auto& [key, value] : user.items()) {
    require(c.contains(key), ErrorKind::kConfig, stage + ": unknown option '" + key + "'");
    const json& def = c[key];
    bool ok = false;
    if (def.is_boolean()) ok = value.is_boolean();
    else if (def.is_number_unsigned()) ok = value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
    else if (def.is_number_integer()) ok = value.is_number_integer();
    else if (def.is_number()) ok = value.is_number();
    else if (def.is_string()) ok = value.is_string();
    else if (def.is_array()) {
      ok = value.is_array() && std::all_of(value.begin(), value.end(), [](const json& e) { return e.is_string(); });
    }
    require(ok, ErrorKind::kConfig, stage + ": option '" + key + "' has the wrong type (default is " + def.dump() + ")");
    c[key] = value;
  }
  return c;
}

json cmd_synth_data(const json& config, const Logger& log) {
  const json c = resolve_config("synth-data", config);
  const auto out = out_dir(c);
  data::SynthParams p;
  p.train_per_file = c["train_per_file"].get<std::size_t>();
  p.train_files = c["train_files"].get<int>();
  p.test_records = c["test_records"].get<std::size_t>();
  p.seed = c["seed"].get<std::uint64_t>();
  require(p.train_files >= 1 && p.train_per_file >= 1 && p.test_records >= 1, ErrorKind::kConfig,
          "synth-data: file and record counts must be positive");
  say(log, "writing synthetic CIFAR-format data to " + out.string());
  const auto files = data::write_synthetic_cifar(out, p);
  std::vector<fs::path> outputs = files.train;
  outputs.push_back(files.test);
  return finish(out, "synth-data", c, outputs,
                {{"train_records", p.train_per_file * p.train_files}, {"test_records", p.test_records}});
}

json cmd_train_model(const json& config, const Logger& log) {
  const json c = resolve_config("train-model", config);
  const auto out = out_dir(c);
  const auto split = data::load_cifar10(input_path(c, "data"));
  const auto arch_file = c["arch"].get<std::string>();
  const auto arch = arch_file.empty() ? nn::ArchConfig::parse(detail::kDeskArch) : nn::ArchConfig::load(checked(arch_file));

  data::ImageBatch train = split.train;
  const auto limit = c["train_limit"].get<std::size_t>();
  if (limit > 0 && limit < train.size()) {
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), 0);
    train = train.subset(idx);
  }
  nn::TrainHyper h;
  h.lr = c["lr"].get<float>();
  h.momentum = c["momentum"].get<float>();
  h.weight_decay = c["weight_decay"].get<float>();
  h.epochs = c["epochs"].get<int>();
  h.batch_size = c["batch_size"].get<int>();
  h.seed = c["seed"].get<std::uint64_t>();

  auto net = nn::Network::build(arch, h.seed);
  say(log, "training " + arch.name + " (" + std::to_string(net.parameter_count()) + " parameters) on " +
               std::to_string(train.size()) + " images");
  const auto rep = nn::train(net, train.images, train.labels, h, [&](int epoch, double loss, double acc) {
    say(log, "epoch " + std::to_string(epoch) + " loss " + detail::double_text(loss) + " train accuracy " +
                 detail::double_text(acc));
  });
  const double loss = rep.epoch_loss.empty() ? rep.initial_loss : rep.epoch_loss.back();
  require(std::isfinite(loss), ErrorKind::kNumeric, "training diverged (non-finite loss)");
  const double test_acc = accuracy(net, split.test);
  say(log, "test accuracy " + detail::double_text(test_acc));

  nn::save_weights(net, out / "weights.sfw");
  io::write_text_atomic(out / "arch.json", arch.to_json());
  return finish(out, "train-model", c, {out / "weights.sfw", out / "arch.json"},
                {{"train_images", train.size()},
                 {"epoch_loss", rep.epoch_loss},
                 {"epoch_accuracy", rep.epoch_accuracy},
                 {"test_accuracy", test_acc},
                 {"test_images", split.test.size()}});
}

json cmd_attack(const json& config, const Logger& log) {
  const json c = resolve_config("attack", config);
  const auto out = out_dir(c);
  const fs::path model_dir = input_path(c, "model");
  const auto arch = checked(model_dir / "arch.json");
  const auto weights = checked(model_dir / "weights.sfw");
  const auto files = data::locate_cifar10(input_path(c, "data"));
  const auto attacks = string_list(c, "attacks");

  json summary{{"attacks", json::array()}};
  std::vector<fs::path> outputs;
  for (const auto& spec : attacks) {
    const auto params = attack::AttackParams::parse(spec);
    params.validate();
    const fs::path dir = attacks.size() == 1 ? out : out / slug(params.to_string());
    fs::create_directories(dir);

    data::Manifest m;
    m.attack = params.to_string();
    m.batch_count = c["batch_count"].get<std::size_t>();
    m.batch_size = c["batch_size"].get<std::size_t>();
    m.seed = c["seed"].get<std::uint64_t>();
    m.split_seed = c["split_seed"].get<std::uint64_t>();
    m.correct_only = c["correct_only"].get<bool>();
    m.successful_only = c["successful_only"].get<bool>();
    m.arch = data::file_ref(fs::absolute(arch));
    m.weights = data::file_ref(fs::absolute(weights));
    m.images = {data::file_ref(fs::absolute(checked(files.test)))};
    m.base_dir = dir;
    require(m.batch_count >= 1 && m.batch_size >= 1, ErrorKind::kConfig, "attack: batch_count and batch_size must be >= 1");

    say(log, "attacking " + std::to_string(m.batch_count * m.batch_size) + " images with " + m.attack);
    const auto exp = data::assemble_experiment(m, workers_of(c));
    m.save(dir / "manifest.json");
    data::write_image_batch(dir / "benign.sfi", exp.benign);
    data::write_image_batch(dir / "adversarial.sfi", exp.adversarial);
    data::write_adversarial(dir / "adversarial.bin", exp.adversarial, exp.meta);

    // Accuracy per epsilon: the fraction of attacked images still given their label.
    std::map<double, std::pair<std::size_t, std::size_t>> per_eps;
    std::size_t clean = 0;
    for (std::size_t i = 0; i < exp.benign.size(); ++i) {
      auto& [kept, total] = per_eps[exp.meta.epsilons[i]];
      kept += exp.meta.adversarial_class[i] == exp.benign.labels[i];
      ++total;
      clean += exp.meta.original_class[i] == exp.benign.labels[i];
    }
    json eps = json::array();
    for (const auto& [e, kt] : per_eps) {
      eps.push_back({{"epsilon", e}, {"images", kt.second}, {"accuracy", static_cast<double>(kt.first) / kt.second}});
    }
    const auto successes = std::count(exp.meta.success.begin(), exp.meta.success.end(), true);
    summary["attacks"].push_back({{"attack", m.attack},
                                  {"directory", dir.string()},
                                  {"images", exp.benign.size()},
                                  {"clean_accuracy", exp.benign.size() ? double(clean) / exp.benign.size() : 0.0},
                                  {"successes", successes},
                                  {"per_epsilon", eps},
                                  {"experiment_checksum", exp.checksum()}});
    for (const char* f : {"manifest.json", "benign.sfi", "adversarial.sfi", "adversarial.bin", "adversarial.bin.json"}) {
      outputs.push_back(dir / f);
    }
    if (dir != out) {
      std::vector<fs::path> own(outputs.end() - 5, outputs.end());
      finish(dir, "attack", c, own, summary["attacks"].back());
    }
  }
  return finish(out, "attack", c, outputs, summary);
}

json cmd_segment(const json& config, const Logger& log) {
  const json c = resolve_config("segment", config);
  const auto out = out_dir(c);
  const auto exp = load_experiment(input_path(c, "input"));
  std::vector<fs::path> outputs;
  json cells = json::array();
  for (const auto& spec : seg_specs(c)) {
    std::vector<seg::LabelMap> maps;
    for (const auto* b : {&exp.benign, &exp.adversarial}) {
      for (std::size_t i = 0; i < b->size(); ++i) maps.push_back(seg::segment(b->images.item_tensor(i), spec));
    }
    const auto path = out / (slug(spec.to_string()) + ".segl");
    seg::save_label_maps(path, maps);
    double total = 0;
    for (const auto& m : maps) total += m.segment_count;
    say(log, spec.to_string() + ": mean " + detail::double_text(total / std::max<std::size_t>(1, maps.size())) +
                 " segments");
    cells.push_back({{"segmentation", spec.to_string()}, {"file", path.filename().string()}, {"images", maps.size()},
                     {"mean_segments", maps.empty() ? 0.0 : total / maps.size()}});
    outputs.push_back(path);
  }
  return finish(out, "segment", c, outputs, {{"segmentations", cells}});
}

json cmd_extract(const json& config, const Logger& log) {
  const json c = resolve_config("extract", config);
  const auto out = out_dir(c);
  const auto model = load_model(input_path(c, "model"));
  const fs::path input = input_path(c, "input");
  const auto exp = load_experiment(input);
  const auto modes = tap_specs(c);
  const auto segments_dir = c["segments"].get<std::string>();
  attr::ExtractOptions eo;
  eo.workers = workers_of(c);
  eo.chunk = c["chunk"].get<int>();

  std::vector<fs::path> outputs;
  json cells = json::array();
  for (const auto& spec : seg_specs(c)) {
    std::vector<seg::LabelMap> maps;
    if (!segments_dir.empty()) {
      const auto path = fs::path(segments_dir) / (slug(spec.to_string()) + ".segl");
      if (fs::exists(path) || !expected_checksum(path).empty()) maps = seg::load_label_maps(checked(path));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto ex = extract_experiment(model.net, exp, spec, modes, eo, model.weights_checksum, maps);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t images = exp.benign.size() + exp.adversarial.size();
    std::vector<int> counts = ex.benign_segments;
    counts.insert(counts.end(), ex.adversarial_segments.begin(), ex.adversarial_segments.end());
    json files = json::array();
    for (std::size_t t = 0; t < modes.size(); ++t) {
      auto ds = ex.datasets[t];
      json prov = parse_json_object(ds.provenance, "feature provenance");
      prov["attack"] = exp.meta.attack;
      prov["input"] = fs::absolute(input).string();
      prov["config"] = c;
      ds.provenance = prov.dump(2) + "\n";
      const auto path = out / ("features_" + slug(spec.to_string()) + "_" + slug(modes[t].to_string()) + ".csv");
      data::write_features(path, ds);
      outputs.push_back(path);
      outputs.push_back(data::provenance_path(path));
      files.push_back({{"mode", modes[t].to_string()},
                       {"file", path.filename().string()},
                       {"dimension", ds.dimension()},
                       {"rows", ds.rows.size()},
                       {"attribution_bytes", attribution_bytes(counts, ds.dimension())}});
    }
    say(log, spec.to_string() + ": " + std::to_string(ex.forward_passes) + " forward passes for " +
                 std::to_string(images) + " images in " + detail::double_text(seconds) + " s");
    require(ex.forward_passes == forward_passes(counts), ErrorKind::kNumeric,
            "forward-pass count " + std::to_string(ex.forward_passes) + " differs from the k+1 budget " +
                std::to_string(forward_passes(counts)));
    json per_image = json::array();
    for (int k : counts) per_image.push_back(k + 1);
    cells.push_back({{"segmentation", spec.to_string()},
                     {"forward_passes", ex.forward_passes},
                     {"passes_per_image", per_image},
                     {"seconds", seconds},
                     {"features", files}});
  }
  return finish(out, "extract", c, outputs, {{"cells", cells}, {"images", exp.benign.size() + exp.adversarial.size()}});
}

json cmd_train_detector(const json& config, const Logger& log) {
  const json c = resolve_config("train-detector", config);
  const auto out = out_dir(c);
  const auto features = checked(input_path(c, "features"));
  const auto ds = data::read_features(features);
  const auto source_checksum = io::file_checksum(features);
  auto [train, test] = det::split_train_test(ds, c["train_fraction"].get<double>(), c["split_seed"].get<std::uint64_t>());
  json prov = ds.provenance.empty() ? json::object() : parse_json_object(ds.provenance, features.string() + " provenance");
  for (auto* part : {&train, &test}) {
    json p = prov;
    p["source"] = fs::absolute(features).string();
    p["source_checksum"] = source_checksum;
    p["part"] = part == &train ? "train" : "test";
    p["split_seed"] = c["split_seed"];
    p["train_fraction"] = c["train_fraction"];
    part->provenance = p.dump(2) + "\n";
  }

  det::Detector d;
  const auto kind = c["detector"].get<std::string>();
  if (kind == "gbt") {
    det::GbtHyper h;
    h.trees = c["trees"].get<int>();
    h.depth = c["depth"].get<int>();
    h.lr = c["learning_rate"].get<double>();
    h.subsample = c["subsample"].get<double>();
    h.lambda = c["lambda"].get<double>();
    h.min_child_weight = c["min_child_weight"].get<double>();
    h.seed = c["seed"].get<std::uint64_t>();
    d.model = det::train_gbt(train, h);
  } else if (kind == "logistic") {
    det::LogisticHyper h;
    h.lr = c["logistic_lr"].get<double>();
    h.epochs = c["logistic_epochs"].get<int>();
    h.l2 = c["l2"].get<double>();
    d.model = det::train_logistic(train, h);
  } else {
    fail(ErrorKind::kConfig, "unknown detector '" + kind + "' (expected gbt or logistic)");
  }
  d.feature_checksum = source_checksum;
  const auto train_report = det::evaluate(d, train);
  say(log, kind + " detector on " + std::to_string(train.rows.size()) + " rows, train AUC " +
               detail::double_text(train_report.auc));

  data::write_features(out / "train.csv", train);
  data::write_features(out / "test.csv", test);
  d.save(out / "detector.json");
  return finish(out, "train-detector", c,
                {out / "detector.json", out / "train.csv", out / "test.csv", data::provenance_path(out / "train.csv"),
                 data::provenance_path(out / "test.csv")},
                {{"detector", kind},
                 {"dimension", ds.dimension()},
                 {"train_rows", train.rows.size()},
                 {"test_rows", test.rows.size()},
                 {"train_auc", train_report.auc},
                 {"feature_checksum", source_checksum}});
}

json cmd_evaluate(const json& config, const Logger& log) {
  const json c = resolve_config("evaluate", config);
  const auto out = out_dir(c);
  const auto d = det::Detector::load(checked(input_path(c, "detector")));
  const auto features = checked(input_path(c, "features"));
  const auto test = data::read_features(features);
  const json prov = test.provenance.empty() ? json::object() : parse_json_object(test.provenance, features.string() + " provenance");
  const auto source = prov.value("source_checksum", std::string());
  if (!d.feature_checksum.empty()) {
    require(source == d.feature_checksum, ErrorKind::kData,
            features.string() + " was not split from the features the detector was trained on: expected checksum " +
                d.feature_checksum + ", found " + (source.empty() ? std::string("none") : source));
  }
  require(test.dimension() == d.dimension(), ErrorKind::kData,
          "detector expects " + std::to_string(d.dimension()) + " features, " + features.string() + " has " +
              std::to_string(test.dimension()));
  const auto rep = det::evaluate(d, test);

  data::ReportRow row;
  for (const auto& r : test.rows) {
    if (r.label == det::kAdversarial) {
      row.attack = r.attack;
      break;
    }
  }
  row.segmentation = prov.value("segmentation", std::string());
  row.mode = prov.value("taps", std::string());
  row.detector = d.kind();
  row.dimension = d.dimension();
  row.auc = rep.auc;
  row.accuracy = rep.accuracy;
  row.test_count = rep.count;
  row.benign = rep.benign;
  row.adversarial = rep.adversarial;
  const std::vector<data::ReportRow> rows{row};
  data::write_report(out / "report.csv", rows);
  say(log, row.segmentation + " / " + row.mode + " / " + row.detector + ": AUC " + detail::double_text(rep.auc));
  return finish(out, "evaluate", c, {out / "report.csv"},
                {{"auc", rep.auc},
                 {"accuracy", rep.accuracy},
                 {"count", rep.count},
                 {"benign", rep.benign},
                 {"adversarial", rep.adversarial},
                 {"segmentation", row.segmentation},
                 {"mode", row.mode},
                 {"detector", row.detector}});
}

namespace {

void pair_auc(std::vector<BenchRecord>& records, std::span<const data::ReportRow> rows, const std::string& detector) {
  std::vector<BenchRecord> paired;
  for (const auto& r : records) {
    bool any = false;
    for (const auto& row : rows) {
      if (row.detector != detector || row.segmentation != r.segmentation || row.mode != r.mode) continue;
      auto p = r;
      p.auc = row.auc;
      p.attack = row.attack;
      paired.push_back(p);
      any = true;
    }
    if (!any) paired.push_back(r);
  }
  records = std::move(paired);
}

std::vector<BenchRecord> parse_bench_csv(const std::string& text) {
  const auto table = detail::csv_parse(text);
  require(!table.empty() && table[0].size() == 11 && table[0][0] == "segmentation", ErrorKind::kData,
          "bench table: unexpected header");
  std::vector<BenchRecord> out;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& f = table[i];
    require(f.size() == 11, ErrorKind::kData, "bench table: row " + std::to_string(i) + " has the wrong field count");
    try {
      BenchRecord r;
      r.segmentation = f[0];
      r.mode = f[1];
      r.images = std::stoull(f[2]);
      r.workers = std::stoi(f[3]);
      r.repeats = std::stoi(f[4]);
      r.median_seconds = std::stod(f[5]);
      r.seconds_per_128 = std::stod(f[6]);
      r.forward_passes = std::stoull(f[7]);
      r.attribution_bytes = std::stoull(f[8]);
      r.mean_segments = std::stod(f[9]);
      r.auc = f[10].empty() ? -1.0 : std::stod(f[10]);
      out.push_back(r);
    } catch (const std::exception&) {
      fail(ErrorKind::kData, "bench table: row " + std::to_string(i) + " has a malformed number");
    }
  }
  return out;
}

}  // namespace

json cmd_bench(const json& config, const Logger& log) {
  const json c = resolve_config("bench", config);
  const auto out = out_dir(c);
  const auto model = load_model(input_path(c, "model"));
  auto batch = load_images(input_path(c, "input"));
  const auto want = c["images"].get<std::size_t>();
  require(want >= 1, ErrorKind::kConfig, "bench: images must be >= 1");
  require(batch.size() >= want, ErrorKind::kData,
          "bench: asked for " + std::to_string(want) + " images, input holds " + std::to_string(batch.size()));
  std::vector<std::size_t> idx(want);
  std::iota(idx.begin(), idx.end(), 0);
  batch = batch.subset(idx);

  BenchOptions o;
  o.repeats = c["repeats"].get<int>();
  o.warmup = c["warmup"].get<int>();
  o.workers = workers_of(c);
  o.chunk = c["chunk"].get<int>();
  require(o.repeats >= 3, ErrorKind::kConfig, "bench: at least 3 timed repetitions are required");
  const auto segs = seg_specs(c);
  const auto modes = tap_specs(c);
  auto records = run_bench(model.net, batch.images, segs, modes, o, [&](const BenchRecord& r) {
    say(log, r.segmentation + " / " + r.mode + ": " + detail::double_text(r.seconds_per_128) + " s per 128 images, " +
                 std::to_string(r.forward_passes) + " forward passes");
  });
  const auto report = c["report"].get<std::string>();
  if (!report.empty()) pair_auc(records, data::read_report(checked(report)), c["detector"].get<std::string>());
  io::write_text_atomic(out / "bench.csv", bench_csv(records));
  io::write_text_atomic(out / "scatter.csv", scatter_csv(records));

  json cells = json::array();
  for (const auto& r : records) {
    cells.push_back({{"segmentation", r.segmentation},
                     {"mode", r.mode},
                     {"seconds_per_128", r.seconds_per_128},
                     {"forward_passes", r.forward_passes},
                     {"attribution_bytes", r.attribution_bytes}});
  }
  return finish(out, "bench", c, {out / "bench.csv", out / "scatter.csv"}, {{"cells", cells}, {"images", want}});
}

json cmd_report(const json& config, const Logger& log) {
  const json c = resolve_config("report", config);
  const auto out = out_dir(c);
  std::vector<data::ReportRow> rows;
  for (const auto& p : c["reports"].get<std::vector<std::string>>()) {
    const auto part = data::read_report(checked(p));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  require(!rows.empty(), ErrorKind::kConfig, "report: no report files given");
  data::write_report(out / "report.csv", rows);
  std::vector<fs::path> outputs{out / "report.csv"};
  const auto bench = c["bench"].get<std::string>();
  if (!bench.empty()) {
    auto records = parse_bench_csv(io::read_text(checked(bench)));
    pair_auc(records, rows, c["detector"].get<std::string>());
    io::write_text_atomic(out / "scatter.csv", scatter_csv(records));
    outputs.push_back(out / "scatter.csv");
  }
  say(log, "merged " + std::to_string(rows.size()) + " report rows");
  return finish(out, "report", c, outputs, {{"rows", rows.size()}});
}

json run_stage(const std::string& stage, const json& config, const Logger& log) {
  if (stage == "synth-data") return cmd_synth_data(config, log);
  if (stage == "train-model") return cmd_train_model(config, log);
  if (stage == "attack") return cmd_attack(config, log);
  if (stage == "segment") return cmd_segment(config, log);
  if (stage == "extract") return cmd_extract(config, log);
  if (stage == "train-detector") return cmd_train_detector(config, log);
  if (stage == "evaluate") return cmd_evaluate(config, log);
  if (stage == "bench") return cmd_bench(config, log);
  if (stage == "report") return cmd_report(config, log);
  fail(ErrorKind::kConfig, "unknown stage '" + stage + "'");
}

}  // namespace segloo::pipeline
