#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "segloo/error.hpp"

namespace segloo::detail {

// "a=1,b=2,3" -> {a: "1", b: "2,3"}; an item without '=' continues the previous value.
inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string item;
  std::string last;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      require(!last.empty(), ErrorKind::kConfig, "expected key=value, got '" + item + "'");
      kv[last] += "," + item;
      continue;
    }
    last = item.substr(0, eq);
    require(!last.empty(), ErrorKind::kConfig, "empty parameter name in '" + item + "'");
    kv[last] = item.substr(eq + 1);
  }
  return kv;
}

// Splits "name:params" at the first colon.
inline std::pair<std::string, std::map<std::string, std::string>> parse_cell(const std::string& text) {
  const auto colon = text.find(':');
  return {text.substr(0, colon), parse_kv(colon == std::string::npos ? "" : text.substr(colon + 1))};
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::kConfig, "parameter " + key + " is not a number: '" + v + "'");
}

inline long long to_integer(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::kConfig, "parameter " + key + " is not an integer: '" + v + "'");
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, item));
  require(!out.empty(), ErrorKind::kConfig, "parameter " + key + " has no values");
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace segloo::detail
