#include "segloo/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "internal/rng.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"

namespace segloo::det {

using json = nlohmann::json;

std::size_t FeatureDataset::count(int label) const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [&](const FeatureRow& r) { return r.label == label; }));
}

void FeatureDataset::validate() const {
  const std::size_t d = dimension();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    require(r.features.size() == d, ErrorKind::kData,
            "row " + std::to_string(i) + " has " + std::to_string(r.features.size()) + " features, expected " +
                std::to_string(d));
    require(r.label == kBenign || r.label == kAdversarial, ErrorKind::kData, "row " + std::to_string(i) + " has a bad label");
    for (float v : r.features) require(std::isfinite(v), ErrorKind::kNumeric, "row " + std::to_string(i) + " is non-finite");
  }
}

std::pair<FeatureDataset, FeatureDataset> split_train_test(const FeatureDataset& ds, double train_fraction,
                                                           std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::kConfig, "train fraction must be in (0, 1)");
  ds.validate();
  std::vector<bool> to_train(ds.rows.size(), false);
  detail::Rng rng(seed);
  for (int label : {kBenign, kAdversarial}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.rows.size(); ++i)
      if (ds.rows[i].label == label) idx.push_back(i);
    require(idx.size() >= 2, ErrorKind::kData,
            std::string("need at least 2 ") + (label == kBenign ? "benign" : "adversarial") + " rows to split, have " +
                std::to_string(idx.size()));
    rng.shuffle(idx);
    const auto keep = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(train_fraction * idx.size())), 1,
                                              idx.size() - 1);
    for (std::size_t i = 0; i < keep; ++i) to_train[idx[i]] = true;
  }
  FeatureDataset train, test;
  train.provenance = test.provenance = ds.provenance;
  for (std::size_t i = 0; i < ds.rows.size(); ++i) (to_train[i] ? train : test).rows.push_back(ds.rows[i]);
  return {std::move(train), std::move(test)};
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorKind::kConfig, "score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  for (double s : scores) require(!std::isnan(s), ErrorKind::kNumeric, "NaN score");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of midranks (1-based, doubled to stay integral) over positives.
  double rank2_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank2 = static_cast<double>(i + 1 + j);  // 2 * average of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == kAdversarial) {
        rank2_sum += midrank2;
        ++pos;
      } else {
        require(labels[order[t]] == kBenign, ErrorKind::kData, "labels must be 0 or 1");
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  require(pos > 0 && neg > 0, ErrorKind::kData, "AUC needs both classes");
  // wins + ties/2 = rank_sum - pos(pos+1)/2
  const double wins = (rank2_sum - static_cast<double>(pos) * (pos + 1)) / 2.0;
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

// ---------------------------------------------------------------------------
// Logistic regression

namespace {

double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void require_both_classes(const FeatureDataset& ds) {
  require(!ds.rows.empty(), ErrorKind::kData, "empty training set");
  require(ds.count(kBenign) > 0 && ds.count(kAdversarial) > 0, ErrorKind::kData,
          "training set must contain both benign and adversarial rows");
  require(ds.dimension() > 0, ErrorKind::kData, "training rows have no features");
}

std::vector<int> labels_of(const FeatureDataset& ds) {
  std::vector<int> y;
  for (const auto& r : ds.rows) y.push_back(r.label);
  return y;
}

}  // namespace

double logistic_loss(std::span<const double> weights, double bias, const std::vector<std::vector<double>>& x,
                     std::span<const int> y, double l2, std::vector<double>* grad) {
  const std::size_t n = x.size(), d = weights.size();
  if (grad) grad->assign(d + 1, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = bias;
    for (std::size_t j = 0; j < d; ++j) z += weights[j] * x[i][j];
    loss += log1pexp(z) - y[i] * z;
    if (grad) {
      const double r = sigmoid(z) - y[i];
      for (std::size_t j = 0; j < d; ++j) (*grad)[j] += r * x[i][j];
      (*grad)[d] += r;
    }
  }
  double reg = 0.0;
  for (double w : weights) reg += w * w;
  if (grad) {
    for (std::size_t j = 0; j <= d; ++j) (*grad)[j] /= static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) (*grad)[j] += l2 * weights[j];
  }
  return loss / static_cast<double>(n) + 0.5 * l2 * reg;
}

double LogisticModel::score(std::span<const float> x) const {
  require(x.size() == weights.size(), ErrorKind::kConfig,
          "detector expects " + std::to_string(weights.size()) + " features, got " + std::to_string(x.size()));
  double z = bias;
  for (std::size_t j = 0; j < x.size(); ++j) z += weights[j] * (x[j] - mean[j]) / scale[j];
  return z;
}

LogisticModel train_logistic(const FeatureDataset& train, const LogisticHyper& hyper) {
  train.validate();
  require_both_classes(train);
  require(hyper.lr > 0 && hyper.epochs >= 1 && hyper.l2 >= 0, ErrorKind::kConfig, "bad logistic hyperparameters");
  const std::size_t n = train.rows.size(), d = train.dimension();
  LogisticModel m;
  m.hyper = hyper;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 0.0);
  for (const auto& r : train.rows)
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += r.features[j];
  for (auto& v : m.mean) v /= static_cast<double>(n);
  for (const auto& r : train.rows)
    for (std::size_t j = 0; j < d; ++j) m.scale[j] += (r.features[j] - m.mean[j]) * (r.features[j] - m.mean[j]);
  for (auto& v : m.scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] = (train.rows[i].features[j] - m.mean[j]) / m.scale[j];
  const auto y = labels_of(train);

  m.weights.assign(d, 0.0);
  std::vector<double> grad, trial_w(d);
  double loss = logistic_loss(m.weights, m.bias, x, y, hyper.l2, &grad);
  m.initial_loss = loss;
  double step = hyper.lr;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    if (gnorm2 < 1e-20) break;
    // Backtracking keeps every accepted step a strict decrease.
    while (true) {
      for (std::size_t j = 0; j < d; ++j) trial_w[j] = m.weights[j] - step * grad[j];
      const double trial_b = m.bias - step * grad[d];
      const double trial = logistic_loss(trial_w, trial_b, x, y, hyper.l2);
      if (trial <= loss - 0.5 * step * gnorm2) {
        m.weights = trial_w;
        m.bias = trial_b;
        break;
      }
      step *= 0.5;
      if (step < 1e-12) break;
    }
    if (step < 1e-12) break;
    loss = logistic_loss(m.weights, m.bias, x, y, hyper.l2, &grad);
    step = std::min(hyper.lr, step * 2.0);
  }
  m.final_loss = loss;
  require(std::isfinite(m.bias) && std::all_of(m.weights.begin(), m.weights.end(), [](double w) { return std::isfinite(w); }),
          ErrorKind::kNumeric, "logistic training diverged");
  return m;
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees

double GbtTree::eval(std::span<const float> x) const {
  int i = 0;
  while (nodes[i].feature >= 0) i = static_cast<double>(x[nodes[i].feature]) < nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].value;
}

double GbtModel::score(std::span<const float> x) const {
  require(x.size() == dimension, ErrorKind::kConfig,
          "detector expects " + std::to_string(dimension) + " features, got " + std::to_string(x.size()));
  double s = base_score;
  for (const auto& t : trees) s += t.eval(x);
  return s;
}

namespace {

double mean_logloss(std::span<const double> margin, std::span<const int> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += log1pexp(margin[i]) - y[i] * margin[i];
  return s / static_cast<double>(y.size());
}

struct Split {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

}  // namespace

GbtModel train_gbt(const FeatureDataset& train, const GbtHyper& hyper) {
  train.validate();
  require_both_classes(train);
  require(hyper.trees >= 1 && hyper.depth >= 1 && hyper.lr > 0 && hyper.subsample > 0 && hyper.subsample <= 1 &&
              hyper.lambda >= 0 && hyper.min_child_weight >= 0,
          ErrorKind::kConfig, "bad GBT hyperparameters");
  const std::size_t n = train.rows.size(), d = train.dimension();
  const auto y = labels_of(train);

  // Column-major copy and per-feature row order by value.
  std::vector<std::vector<float>> cols(d, std::vector<float>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) cols[j][i] = train.rows[i].features[j];
  std::vector<std::vector<std::uint32_t>> order(d, std::vector<std::uint32_t>(n));
  for (std::size_t j = 0; j < d; ++j) {
    std::iota(order[j].begin(), order[j].end(), 0u);
    std::stable_sort(order[j].begin(), order[j].end(), [&](std::uint32_t a, std::uint32_t b) { return cols[j][a] < cols[j][b]; });
  }

  GbtModel m;
  m.dimension = d;
  m.hyper = hyper;
  const double pos = static_cast<double>(train.count(kAdversarial));
  m.base_score = std::log(pos / (static_cast<double>(n) - pos));
  std::vector<double> margin(n, m.base_score), g(n), h(n);
  std::vector<int> node_of(n);
  detail::Rng rng(hyper.seed);
  std::vector<std::size_t> perm(n);

  for (int t = 0; t < hyper.trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(margin[i]);
      g[i] = p - y[i];
      h[i] = p * (1.0 - p);
    }
    std::fill(node_of.begin(), node_of.end(), 0);
    if (hyper.subsample < 1.0) {
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(hyper.subsample * n)));
      for (std::size_t i = keep; i < n; ++i) node_of[perm[i]] = -1;
    }
    GbtTree tree;
    tree.nodes.emplace_back();
    std::vector<int> frontier{0};
    for (int level = 0; level < hyper.depth && !frontier.empty(); ++level) {
      const std::size_t nn = tree.nodes.size();
      std::vector<double> gs(nn, 0.0), hs(nn, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (node_of[i] >= 0) {
          gs[node_of[i]] += g[i];
          hs[node_of[i]] += h[i];
        }
      std::vector<char> open(nn, 0);
      for (int id : frontier) open[id] = 1;
      std::vector<Split> best(nn);
      std::vector<double> gl(nn), hl(nn), last(nn);
      std::vector<char> seen(nn);
      for (std::size_t j = 0; j < d; ++j) {
        std::fill(gl.begin(), gl.end(), 0.0);
        std::fill(hl.begin(), hl.end(), 0.0);
        std::fill(seen.begin(), seen.end(), 0);
        for (std::uint32_t i : order[j]) {
          const int id = node_of[i];
          if (id < 0 || !open[id]) continue;
          const double v = cols[j][i];
          if (seen[id] && v > last[id]) {
            const double gr = gs[id] - gl[id], hr = hs[id] - hl[id];
            if (hl[id] >= hyper.min_child_weight && hr >= hyper.min_child_weight) {
              const double gain = gl[id] * gl[id] / (hl[id] + hyper.lambda) + gr * gr / (hr + hyper.lambda) -
                                  gs[id] * gs[id] / (hs[id] + hyper.lambda);
              if (gain > best[id].gain) best[id] = {gain, static_cast<int>(j), 0.5 * (last[id] + v)};
            }
          }
          gl[id] += g[i];
          hl[id] += h[i];
          last[id] = v;
          seen[id] = 1;
        }
      }
      std::vector<int> next;
      for (int id : frontier) {
        if (best[id].feature < 0 || best[id].gain <= 1e-12) continue;
        const int left = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        tree.nodes[id].feature = best[id].feature;
        tree.nodes[id].threshold = best[id].threshold;
        tree.nodes[id].left = left;
        tree.nodes[id].right = left + 1;
        next.push_back(left);
        next.push_back(left + 1);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const int id = node_of[i];
        if (id < 0 || tree.nodes[id].feature < 0) continue;
        const auto& node = tree.nodes[id];
        node_of[i] = static_cast<double>(cols[node.feature][i]) < node.threshold ? node.left : node.right;
      }
      frontier = std::move(next);
    }
    // Newton leaf values.
    std::vector<double> gs(tree.nodes.size(), 0.0), hs(tree.nodes.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (node_of[i] >= 0) {
        gs[node_of[i]] += g[i];
        hs[node_of[i]] += h[i];
      }
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
      if (tree.nodes[id].feature < 0) tree.nodes[id].value = -hyper.lr * gs[id] / (hs[id] + hyper.lambda);
    }
    for (std::size_t i = 0; i < n; ++i) margin[i] += tree.eval(train.rows[i].features);
    m.trees.push_back(std::move(tree));
    m.train_loss.push_back(mean_logloss(margin, y));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Detector wrapper and serialization

std::string Detector::kind() const { return std::holds_alternative<LogisticModel>(model) ? "logistic" : "gbt"; }

std::size_t Detector::dimension() const {
  return std::visit([](const auto& m) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(m)>, LogisticModel>) return m.weights.size();
    else return m.dimension;
  }, model);
}

double Detector::score(std::span<const float> x) const {
  return std::visit([&](const auto& m) { return m.score(x); }, model);
}

std::vector<double> Detector::scores(const FeatureDataset& ds) const {
  std::vector<double> out;
  out.reserve(ds.rows.size());
  for (const auto& r : ds.rows) out.push_back(score(r.features));
  return out;
}

std::string Detector::to_json() const {
  json j;
  j["format"] = "segloo-detector";
  j["version"] = 1;
  j["kind"] = kind();
  j["feature_checksum"] = feature_checksum;
  if (const auto* lm = std::get_if<LogisticModel>(&model)) {
    j["hyper"] = {{"lr", lm->hyper.lr}, {"epochs", lm->hyper.epochs}, {"l2", lm->hyper.l2}};
    j["mean"] = lm->mean;
    j["scale"] = lm->scale;
    j["weights"] = lm->weights;
    j["bias"] = lm->bias;
    j["initial_loss"] = lm->initial_loss;
    j["final_loss"] = lm->final_loss;
  } else {
    const auto& gm = std::get<GbtModel>(model);
    j["hyper"] = {{"trees", gm.hyper.trees}, {"depth", gm.hyper.depth}, {"lr", gm.hyper.lr},
                  {"subsample", gm.hyper.subsample}, {"lambda", gm.hyper.lambda},
                  {"min_child_weight", gm.hyper.min_child_weight}, {"seed", gm.hyper.seed}};
    j["dimension"] = gm.dimension;
    j["base_score"] = gm.base_score;
    j["train_loss"] = gm.train_loss;
    json trees = json::array();
    for (const auto& t : gm.trees) {
      json f = json::array(), th = json::array(), l = json::array(), r = json::array(), v = json::array();
      for (const auto& nd : t.nodes) {
        f.push_back(nd.feature);
        th.push_back(nd.threshold);
        l.push_back(nd.left);
        r.push_back(nd.right);
        v.push_back(nd.value);
      }
      trees.push_back({{"feature", f}, {"threshold", th}, {"left", l}, {"right", r}, {"value", v}});
    }
    j["trees"] = trees;
  }
  return j.dump(1) + "\n";
}

namespace {

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

Detector Detector::from_json(const std::string& text) {
  Detector det;
  try {
    const json j = json::parse(text);
    require(j.value("format", "") == "segloo-detector", ErrorKind::kFormat, "not a detector model file");
    require(j.at("version").get<int>() == 1, ErrorKind::kFormat,
            "unsupported detector model version " + std::to_string(j.at("version").get<int>()));
    det.feature_checksum = j.value("feature_checksum", "");
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "logistic") {
      LogisticModel m;
      const auto& hp = j.at("hyper");
      m.hyper = {hp.at("lr").get<double>(), hp.at("epochs").get<int>(), hp.at("l2").get<double>()};
      m.mean = j.at("mean").get<std::vector<double>>();
      m.scale = j.at("scale").get<std::vector<double>>();
      m.weights = j.at("weights").get<std::vector<double>>();
      m.bias = j.at("bias").get<double>();
      m.initial_loss = j.value("initial_loss", 0.0);
      m.final_loss = j.value("final_loss", 0.0);
      require(m.mean.size() == m.weights.size() && m.scale.size() == m.weights.size(), ErrorKind::kFormat,
              "logistic model arrays differ in length");
      require(all_finite(m.weights) && all_finite(m.mean) && all_finite(m.scale) && std::isfinite(m.bias),
              ErrorKind::kNumeric, "logistic model has non-finite parameters");
      det.model = std::move(m);
    } else if (kind == "gbt") {
      GbtModel m;
      const auto& hp = j.at("hyper");
      m.hyper.trees = hp.at("trees").get<int>();
      m.hyper.depth = hp.at("depth").get<int>();
      m.hyper.lr = hp.at("lr").get<double>();
      m.hyper.subsample = hp.at("subsample").get<double>();
      m.hyper.lambda = hp.at("lambda").get<double>();
      m.hyper.min_child_weight = hp.at("min_child_weight").get<double>();
      m.hyper.seed = hp.at("seed").get<std::uint64_t>();
      m.dimension = j.at("dimension").get<std::size_t>();
      m.base_score = j.at("base_score").get<double>();
      m.train_loss = j.value("train_loss", std::vector<double>{});
      for (const auto& tj : j.at("trees")) {
        const auto f = tj.at("feature").get<std::vector<int>>();
        const auto th = tj.at("threshold").get<std::vector<double>>();
        const auto l = tj.at("left").get<std::vector<int>>();
        const auto r = tj.at("right").get<std::vector<int>>();
        const auto v = tj.at("value").get<std::vector<double>>();
        const std::size_t count = f.size();
        require(count > 0 && th.size() == count && l.size() == count && r.size() == count && v.size() == count,
                ErrorKind::kFormat, "tree arrays differ in length");
        GbtTree tree;
        for (std::size_t i = 0; i < count; ++i) {
          if (f[i] >= 0) {
            require(static_cast<std::size_t>(f[i]) < m.dimension, ErrorKind::kFormat, "tree split feature out of range");
            // children come after their parent, so evaluation always terminates
            require(l[i] > static_cast<int>(i) && r[i] > static_cast<int>(i) && static_cast<std::size_t>(l[i]) < count &&
                        static_cast<std::size_t>(r[i]) < count,
                    ErrorKind::kFormat, "tree child index out of range");
          }
          require(std::isfinite(v[i]) && std::isfinite(th[i]), ErrorKind::kNumeric, "tree has non-finite values");
          tree.nodes.push_back({f[i], th[i], l[i], r[i], v[i]});
        }
        m.trees.push_back(std::move(tree));
      }
      det.model = std::move(m);
    } else {
      fail(ErrorKind::kFormat, "unknown detector kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("bad detector model file: ") + e.what());
  }
  return det;
}

void Detector::save(const std::filesystem::path& path) const { io::write_text_atomic(path, to_json()); }

Detector Detector::load(const std::filesystem::path& path) { return from_json(io::read_text(path)); }

EvalReport evaluate(const Detector& detector, const FeatureDataset& test) {
  test.validate();
  require(!test.rows.empty(), ErrorKind::kData, "empty evaluation set");
  require(test.dimension() == detector.dimension(), ErrorKind::kConfig,
          "detector expects " + std::to_string(detector.dimension()) + " features but the data has " +
              std::to_string(test.dimension()));
  const auto scores = detector.scores(test);
  const auto y = labels_of(test);
  EvalReport r;
  r.auc = auc(scores, y);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += (scores[i] > 0.0) == (y[i] == kAdversarial);
  r.accuracy = static_cast<double>(correct) / y.size();
  r.count = y.size();
  r.benign = test.count(kBenign);
  r.adversarial = test.count(kAdversarial);
  r.provenance = test.provenance;
  return r;
}

}  // namespace segloo::det
