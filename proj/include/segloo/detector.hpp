#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace segloo::det {

enum Label : int { kBenign = 0, kAdversarial = 1 };

struct FeatureRow {
  std::string image_id;
  std::string source;  // e.g. "test:1234"
  std::string attack;  // "none" for benign rows
  double epsilon = 0.0;
  int label = kBenign;
  std::vector<float> features;
};

/// IQR vectors with benign/adversarial labels. `provenance` is the JSON text of the
/// extraction settings and travels with the data.
struct FeatureDataset {
  std::vector<FeatureRow> rows;
  std::string provenance;

  std::size_t dimension() const { return rows.empty() ? 0 : rows.front().features.size(); }
  std::size_t count(int label) const;
  void validate() const;  // equal dimensions, finite values, labels in {0, 1}
};

/// Stratified by label; each class keeps round(train_fraction * n) rows in train (at least
/// one row on each side). Row order inside each part follows the input.
std::pair<FeatureDataset, FeatureDataset> split_train_test(const FeatureDataset& ds, double train_fraction,
                                                           std::uint64_t seed);

/// Probability that a random positive outranks a random negative, ties counted one half.
double auc(std::span<const double> scores, std::span<const int> labels);

struct LogisticHyper {
  double lr = 0.5;
  int epochs = 300;
  double l2 = 1e-3;
};

struct LogisticModel {
  std::vector<double> mean, scale;  // standardization fitted on train
  std::vector<double> weights;
  double bias = 0.0;
  LogisticHyper hyper;
  double initial_loss = 0.0, final_loss = 0.0;

  double score(std::span<const float> x) const;
};

/// Mean cross-entropy plus l2/2 * |w|^2 on already standardized rows, with its gradient
/// (weights..., bias).
double logistic_loss(std::span<const double> weights, double bias, const std::vector<std::vector<double>>& x,
                     std::span<const int> y, double l2, std::vector<double>* grad = nullptr);

LogisticModel train_logistic(const FeatureDataset& train, const LogisticHyper& hyper = {});

struct GbtHyper {
  int trees = 100;
  int depth = 3;
  double lr = 0.1;
  double subsample = 1.0;
  double lambda = 1.0;
  double min_child_weight = 1.0;
  std::uint64_t seed = 0;
};

struct GbtNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // x < threshold goes left
  int left = -1, right = -1;
  double value = 0.0;
};

struct GbtTree {
  std::vector<GbtNode> nodes;  // nodes[0] is the root
  double eval(std::span<const float> x) const;
};

struct GbtModel {
  std::size_t dimension = 0;
  double base_score = 0.0;
  GbtHyper hyper;
  std::vector<GbtTree> trees;
  std::vector<double> train_loss;  // after each tree

  double score(std::span<const float> x) const;
};

GbtModel train_gbt(const FeatureDataset& train, const GbtHyper& hyper = {});

/// A trained detector; scores are raw margins (higher means more likely adversarial).
struct Detector {
  std::variant<LogisticModel, GbtModel> model;
  std::string feature_checksum;  // checksum of the training feature file, if known

  std::string kind() const;
  std::size_t dimension() const;
  double score(std::span<const float> x) const;
  std::vector<double> scores(const FeatureDataset& ds) const;

  std::string to_json() const;
  static Detector from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Detector load(const std::filesystem::path& path);
};

struct EvalReport {
  double auc = 0.5;
  double accuracy = 0.0;  // margin > 0 read as adversarial
  std::size_t count = 0, benign = 0, adversarial = 0;
  std::string provenance;
};

EvalReport evaluate(const Detector& detector, const FeatureDataset& test);

}  // namespace segloo::det
