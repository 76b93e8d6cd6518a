#include <cmath>

#include <nlohmann/json.hpp>

#include "internal/csv.hpp"
#include "segloo/data.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"

namespace segloo::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  require(!s.empty() && end == s.c_str() + s.size(), ErrorKind::kFormat, what + ": not a number '" + s + "'");
  return v;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  const double v = parse_double(s, what);
  require(v >= 0 && v == std::floor(v), ErrorKind::kFormat, what + ": not a count '" + s + "'");
  return static_cast<std::size_t>(v);
}

constexpr const char* kFeatureMeta[5] = {"image_id", "source", "attack", "epsilon", "label"};

}  // namespace

std::string features_csv(const det::FeatureDataset& ds) {
  ds.validate();
  std::vector<std::string> header(std::begin(kFeatureMeta), std::end(kFeatureMeta));
  for (std::size_t j = 0; j < ds.dimension(); ++j) header.push_back("f" + std::to_string(j));
  std::string out = detail::csv_line(header);
  for (const auto& r : ds.rows) {
    std::vector<std::string> f{r.image_id, r.source, r.attack, detail::double_text(r.epsilon),
                               r.label == det::kAdversarial ? "adversarial" : "benign"};
    for (float v : r.features) f.push_back(detail::float_text(v));
    out += detail::csv_line(f);
  }
  return out;
}

det::FeatureDataset parse_features_csv(const std::string& text) {
  const auto rows = detail::csv_parse(text);
  require(!rows.empty(), ErrorKind::kFormat, "feature file has no header");
  const auto& header = rows.front();
  require(header.size() >= 5, ErrorKind::kFormat, "feature header has fewer than 5 columns");
  for (std::size_t i = 0; i < 5; ++i)
    require(header[i] == kFeatureMeta[i], ErrorKind::kFormat, "feature header column " + std::to_string(i) + " is '" + header[i] + "'");
  for (std::size_t j = 5; j < header.size(); ++j)
    require(header[j] == "f" + std::to_string(j - 5), ErrorKind::kFormat, "unexpected feature column '" + header[j] + "'");
  det::FeatureDataset ds;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string where = "feature row " + std::to_string(i);
    require(r.size() == header.size(), ErrorKind::kFormat, where + " has " + std::to_string(r.size()) + " columns");
    det::FeatureRow row;
    row.image_id = r[0];
    row.source = r[1];
    row.attack = r[2];
    row.epsilon = parse_double(r[3], where);
    require(r[4] == "benign" || r[4] == "adversarial", ErrorKind::kFormat, where + ": label '" + r[4] + "'");
    row.label = r[4] == "adversarial" ? det::kAdversarial : det::kBenign;
    for (std::size_t j = 5; j < r.size(); ++j) {
      char* end = nullptr;
      const float v = std::strtof(r[j].c_str(), &end);
      require(!r[j].empty() && end == r[j].c_str() + r[j].size(), ErrorKind::kFormat, where + ": bad value '" + r[j] + "'");
      row.features.push_back(v);
    }
    ds.rows.push_back(std::move(row));
  }
  ds.validate();
  return ds;
}

fs::path provenance_path(const fs::path& csv) {
  auto p = csv;
  p += ".provenance.json";
  return p;
}

void write_features(const fs::path& path, const det::FeatureDataset& ds) {
  io::write_text_atomic(path, features_csv(ds));
  io::write_text_atomic(provenance_path(path), ds.provenance.empty() ? "{}\n" : ds.provenance);
}

det::FeatureDataset read_features(const fs::path& path) {
  auto ds = parse_features_csv(io::read_text(path));
  const auto prov = provenance_path(path);
  if (fs::exists(prov)) ds.provenance = io::read_text(prov);
  return ds;
}

// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string> kReportHeader{"attack",  "segmentation", "mode",   "detector",  "dimension",
                                             "auc",     "accuracy",     "test_count", "benign", "adversarial"};
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = detail::csv_line(kReportHeader);
  for (const auto& r : rows) {
    out += detail::csv_line({r.attack, r.segmentation, r.mode, r.detector, std::to_string(r.dimension),
                             detail::double_text(r.auc), detail::double_text(r.accuracy), std::to_string(r.test_count),
                             std::to_string(r.benign), std::to_string(r.adversarial)});
  }
  return out;
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
  const auto rows = detail::csv_parse(text);
  require(!rows.empty() && rows.front() == kReportHeader, ErrorKind::kFormat, "report header does not match");
  std::vector<ReportRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string where = "report row " + std::to_string(i);
    require(r.size() == kReportHeader.size(), ErrorKind::kFormat, where + " has " + std::to_string(r.size()) + " columns");
    out.push_back({r[0], r[1], r[2], r[3], parse_count(r[4], where), parse_double(r[5], where), parse_double(r[6], where),
                   parse_count(r[7], where), parse_count(r[8], where), parse_count(r[9], where)});
  }
  return out;
}

void write_report(const fs::path& path, std::span<const ReportRow> rows) { io::write_text_atomic(path, report_csv(rows)); }

std::vector<ReportRow> read_report(const fs::path& path) { return parse_report_csv(io::read_text(path)); }

// ---------------------------------------------------------------------------

std::string AdversarialMeta::to_json() const {
  json j{{"attack", attack},         {"epsilons", epsilons},
         {"seed", seed},             {"success", success},
         {"sources", sources},       {"original_class", original_class},
         {"adversarial_class", adversarial_class}};
  return j.dump(1) + "\n";
}

AdversarialMeta AdversarialMeta::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    AdversarialMeta m;
    m.attack = j.at("attack").get<std::string>();
    m.epsilons = j.at("epsilons").get<std::vector<double>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.success = j.at("success").get<std::vector<bool>>();
    m.sources = j.at("sources").get<std::vector<std::string>>();
    m.original_class = j.at("original_class").get<std::vector<int>>();
    m.adversarial_class = j.at("adversarial_class").get<std::vector<int>>();
    const std::size_t n = m.sources.size();
    require(m.epsilons.size() == n && m.success.size() == n && m.original_class.size() == n &&
                m.adversarial_class.size() == n,
            ErrorKind::kFormat, "adversarial metadata arrays differ in length");
    return m;
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("bad adversarial metadata: ") + e.what());
  }
}

void write_adversarial(const fs::path& path, const ImageBatch& batch, const AdversarialMeta& meta) {
  require(meta.sources.size() == batch.size(), ErrorKind::kData, "metadata does not match the batch size");
  write_cifar_file(path, batch);
  auto side = path;
  side += ".json";
  io::write_text_atomic(side, meta.to_json());
}

std::pair<ImageBatch, AdversarialMeta> read_adversarial(const fs::path& path) {
  auto side = path;
  side += ".json";
  auto meta = AdversarialMeta::from_json(io::read_text(side));
  auto batch = read_cifar_file(path, "adv");
  require(meta.sources.size() == batch.size(), ErrorKind::kData,
          path.string() + ": metadata lists " + std::to_string(meta.sources.size()) + " images, file has " +
              std::to_string(batch.size()));
  batch.ids = meta.sources;
  return {std::move(batch), std::move(meta)};
}

}  // namespace segloo::data
