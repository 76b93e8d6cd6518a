// segloo command-line front end. Each subcommand resolves its options into a JSON
// configuration (config file, then flags) and runs the matching stage through the C API.
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "segloo/segloo.h"

using json = nlohmann::json;

namespace {

enum class Kind { kText, kInt, kReal, kList, kOn, kOff };

struct Flag {
  const char* name;  // long flag without dashes
  const char* key;   // configuration key
  Kind kind;
  const char* help;
};

struct Stage {
  const char* name;
  const char* help;
  std::vector<Flag> flags;
};

const std::vector<Stage>& stages() {
  static const std::vector<Stage> s{
      {"synth-data",
       "Write a procedural 10-class dataset in the CIFAR-10 binary layout",
       {{"train-per-file", "train_per_file", Kind::kInt, "records per training file"},
        {"train-files", "train_files", Kind::kInt, "number of training files"},
        {"test-records", "test_records", Kind::kInt, "records in the test file"}}},
      {"train-model",
       "Train the classifier on a CIFAR-format directory",
       {{"data", "data", Kind::kText, "directory with data_batch_*.bin and test_batch.bin"},
        {"arch", "arch", Kind::kText, "architecture JSON (default: built-in desk model)"},
        {"epochs", "epochs", Kind::kInt, "training epochs"},
        {"lr", "lr", Kind::kReal, "learning rate"},
        {"momentum", "momentum", Kind::kReal, "SGD momentum"},
        {"batch-size", "batch_size", Kind::kInt, "mini-batch size"},
        {"train-limit", "train_limit", Kind::kInt, "use only the first N training images (0 = all)"}}},
      {"attack",
       "Sample test images and attack them; one output directory per attack",
       {{"model", "model", Kind::kText, "train-model output directory"},
        {"data", "data", Kind::kText, "CIFAR-format directory"},
        {"attack", "attacks", Kind::kList, "attack cell, e.g. fgsm:eps=0.02,0.06,0.1 (repeatable)"},
        {"batch-count", "batch_count", Kind::kInt, "number of batches"},
        {"batch-size", "batch_size", Kind::kInt, "images per batch"},
        {"split-seed", "split_seed", Kind::kInt, "seed recorded for the train/test split"},
        {"all-images", "correct_only", Kind::kOff, "also sample misclassified images"},
        {"successful-only", "successful_only", Kind::kOn, "keep only successful attacks"}}},
      {"segment",
       "Segment benign and adversarial images of an attack directory",
       {{"input", "input", Kind::kText, "attack output directory"},
        {"segmentation", "segmentations", Kind::kList, "segmentation cell, e.g. slic:n_segments=64 (repeatable)"}}},
      {"extract",
       "Compute leave-one-out IQR features",
       {{"model", "model", Kind::kText, "train-model output directory"},
        {"input", "input", Kind::kText, "attack output directory"},
        {"segments", "segments", Kind::kText, "segment output directory with precomputed label maps"},
        {"segmentation", "segmentations", Kind::kList, "segmentation cell (repeatable)"},
        {"mode", "modes", Kind::kList, "tap mode: 1d, output, multilayer:per_layer=,last_layers=,seed= (repeatable)"},
        {"chunk", "chunk", Kind::kInt, "occluded images per forward call"}}},
      {"train-detector",
       "Split a feature table 80/20 and train a detector",
       {{"features", "features", Kind::kText, "feature CSV from extract"},
        {"detector", "detector", Kind::kText, "gbt or logistic"},
        {"train-fraction", "train_fraction", Kind::kReal, "training share of each class"},
        {"split-seed", "split_seed", Kind::kInt, "split seed"},
        {"trees", "trees", Kind::kInt, "boosting rounds"},
        {"depth", "depth", Kind::kInt, "tree depth"},
        {"learning-rate", "learning_rate", Kind::kReal, "boosting shrinkage"}}},
      {"evaluate",
       "Score a held-out feature table with a trained detector",
       {{"detector", "detector", Kind::kText, "detector.json"},
        {"features", "features", Kind::kText, "test.csv written by train-detector"}}},
      {"bench",
       "Time feature extraction per (segmentation, mode) cell",
       {{"model", "model", Kind::kText, "train-model output directory"},
        {"input", "input", Kind::kText, "attack directory, CIFAR directory or image file"},
        {"images", "images", Kind::kInt, "images per timed run"},
        {"segmentation", "segmentations", Kind::kList, "segmentation cell (repeatable)"},
        {"mode", "modes", Kind::kList, "tap mode (repeatable)"},
        {"repeats", "repeats", Kind::kInt, "timed repetitions (median reported, >= 3)"},
        {"warmup", "warmup", Kind::kInt, "untimed warm-up runs"},
        {"report", "report", Kind::kText, "report.csv to pair AUC values with cells"}}},
      {"report",
       "Merge evaluation reports and build the time-vs-AUC table",
       {{"report", "reports", Kind::kList, "report.csv from evaluate (repeatable)"},
        {"bench", "bench", Kind::kText, "bench.csv to pair with the reports"},
        {"detector", "detector", Kind::kText, "detector kind used for the pairing"}}},
  };
  return s;
}

int exit_code(segloo_status s) {
  switch (s) {
    case SEGLOO_OK: return 0;
    case SEGLOO_ERR_CONFIG: return 2;
    case SEGLOO_ERR_DATA:
    case SEGLOO_ERR_IO:
    case SEGLOO_ERR_FORMAT: return 3;
    case SEGLOO_ERR_NUMERIC: return 4;
    default: return 1;
  }
}

// Adds n_segments to SLIC cells that do not set it.
std::string with_segments(const std::string& cell, int n) {
  if (cell.rfind("slic", 0) != 0 || cell.find("n_segments") != std::string::npos) return cell;
  return cell + (cell.find(':') == std::string::npos ? ":" : ",") + "n_segments=" + std::to_string(n);
}

struct Values {
  std::map<std::string, std::string> scalar;
  std::map<std::string, std::vector<std::string>> list;
  std::map<std::string, bool> toggles;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Leave-one-out attribution features for adversarial image detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(segloo_version()));

  std::string config_path, out;
  std::uint64_t seed = 0;
  int workers = 1, n_segments = 0;
  bool quiet = false;
  std::map<std::string, Values> values;
  std::map<std::string, CLI::App*> subs;

  for (const auto& st : stages()) {
    CLI::App* sub = app.add_subcommand(st.name, st.help);
    subs[st.name] = sub;
    auto& v = values[st.name];
    sub->add_option("--config", config_path, "JSON configuration file (stage object or {\"<stage>\": {...}})")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "suppress progress lines");
    if (std::string(st.name) == "extract" || std::string(st.name) == "segment" || std::string(st.name) == "bench") {
      sub->add_option("--n-segments", n_segments, "n_segments for SLIC cells that do not set it")
          ->check(CLI::PositiveNumber);
    }
    for (const auto& f : st.flags) {
      const std::string flag = std::string("--") + f.name;
      switch (f.kind) {
        case Kind::kText: sub->add_option(flag, v.scalar[f.key], f.help); break;
        case Kind::kInt:
          sub->add_option(flag, v.scalar[f.key], f.help)->check(CLI::Validator(
              [](std::string& t) {
                const bool digits = !t.empty() && t.size() < 20 && t.find_first_not_of("0123456789") == std::string::npos;
                return digits ? std::string() : "expected a non-negative integer, got '" + t + "'";
              },
              "UINT"));
          break;
        case Kind::kReal: sub->add_option(flag, v.scalar[f.key], f.help)->check(CLI::Number); break;
        case Kind::kList: sub->add_option(flag, v.list[f.key], f.help)->take_all(); break;
        case Kind::kOn:
        case Kind::kOff: sub->add_flag(flag, v.toggles[f.key], f.help); break;
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const Stage* stage = nullptr;
  for (const auto& st : stages())
    if (subs[st.name]->parsed()) stage = &st;
  CLI::App* sub = subs[stage->name];

  json config = json::object();
  if (!config_path.empty()) {
    try {
      std::ifstream in(config_path);
      const json file = json::parse(in);
      if (!file.is_object()) throw std::runtime_error("not a JSON object");
      // A file keyed by stage names holds one section per stage; otherwise it is a single stage object.
      bool sectioned = false;
      for (const auto& st : stages()) sectioned |= file.contains(st.name) && file[st.name].is_object();
      config = !sectioned ? file : file.contains(stage->name) ? file[stage->name] : json::object();
    } catch (const std::exception& e) {
      std::cerr << "error: cannot read " << config_path << ": " << e.what() << "\n";
      return 2;
    }
  }
  if (sub->count("--seed")) config["seed"] = seed;
  if (sub->count("--out")) config["out"] = out;
  if (sub->count("--workers")) config["workers"] = workers;
  const auto& v = values[stage->name];
  for (const auto& f : stage->flags) {
    if (sub->count(std::string("--") + f.name) == 0) continue;
    const std::string text = f.kind == Kind::kList ? std::string() : v.scalar.count(f.key) ? v.scalar.at(f.key) : "";
    switch (f.kind) {
      case Kind::kText: config[f.key] = text; break;
      case Kind::kInt: config[f.key] = std::stoull(text); break;
      case Kind::kReal: config[f.key] = std::stod(text); break;
      case Kind::kList: config[f.key] = v.list.at(f.key); break;
      case Kind::kOn: config[f.key] = true; break;
      case Kind::kOff: config[f.key] = false; break;
    }
  }
  if (n_segments > 0 && config.contains("segmentations") && config["segmentations"].is_array()) {
    for (auto& cell : config["segmentations"]) cell = with_segments(cell.get<std::string>(), n_segments);
  } else if (n_segments > 0) {
    char* defaults = nullptr;
    if (segloo_stage_defaults(stage->name, &defaults) == SEGLOO_OK) {
      json d = json::parse(defaults);
      json cells = json::array();
      for (const auto& cell : d["segmentations"]) cells.push_back(with_segments(cell.get<std::string>(), n_segments));
      config["segmentations"] = cells;
    }
    segloo_free_string(defaults);
  }

  const segloo_log_fn print = [](const char* line, void*) { std::cerr << line << "\n"; };
  const segloo_log_fn log = quiet ? nullptr : print;
  char* result = nullptr;
  const segloo_status st = segloo_run_stage(stage->name, config.dump().c_str(), log, nullptr, &result);
  if (st != SEGLOO_OK) {
    std::cerr << "error (" << segloo_status_name(st) << "): " << segloo_last_error() << "\n";
    return exit_code(st);
  }
  std::cout << result << "\n";
  segloo_free_string(result);
  return 0;
}
