#pragma once

// Private JSON helpers shared by config.cpp and harness.cpp. Not installed;
// everything here leaks nlohmann types and stays out of the public headers.

#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cnd/error.hpp"
#include "cnd/linalg.hpp"

namespace cnd::jsonutil {

using nlohmann::json;

inline json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
}

// Strict object reader: every key must be consumed by a read_* call, and
// finish() rejects whatever is left, naming it by path. Missing keys keep
// the caller's default.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be a JSON object");
  }

  void read_int(const char* key, int& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_number_integer()) throw ConfigError(at(key) + " must be an integer");
    out = v->get<int>();
  }

  void read_u64(const char* key, uint64_t& out) {
    const json* v = take(key);
    if (!v) return;
    if (v->is_number_unsigned()) {
      out = v->get<uint64_t>();
      return;
    }
    if (v->is_number_integer() && v->get<int64_t>() >= 0) {
      out = static_cast<uint64_t>(v->get<int64_t>());
      return;
    }
    throw ConfigError(at(key) + " must be a nonnegative integer");
  }

  void read_size(const char* key, size_t& out) {
    uint64_t v = out;
    read_u64(key, v);
    out = static_cast<size_t>(v);
  }

  void read_double(const char* key, double& out) {
    const json* v = take(key);
    if (!v) return;
    if (v->is_null()) {
      out = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    if (!v->is_number()) throw ConfigError(at(key) + " must be a number");
    out = v->get<double>();
  }

  void read_opt_double(const char* key, std::optional<double>& out) {
    const json* v = take(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    if (!v->is_number()) throw ConfigError(at(key) + " must be a number or null");
    out = v->get<double>();
  }

  void read_bool(const char* key, bool& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_boolean()) throw ConfigError(at(key) + " must be a boolean");
    out = v->get<bool>();
  }

  void read_string(const char* key, std::string& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(at(key) + " must be a string");
    out = v->get<std::string>();
  }

  void read_int_list(const char* key, std::vector<int>& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(at(key) + " must be an array of integers");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_number_integer()) throw ConfigError(at(key) + " must be an array of integers");
      out.push_back(e.get<int>());
    }
  }

  void read_double_list(const char* key, std::vector<double>& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(at(key) + " must be an array of numbers");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_number()) throw ConfigError(at(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
  }

  void read_string_list(const char* key, std::vector<std::string>& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(at(key) + " must be an array of strings");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_string()) throw ConfigError(at(key) + " must be an array of strings");
      out.push_back(e.get<std::string>());
    }
  }

  // Nested object; returns nullptr when absent.
  const json* object(const char* key) {
    const json* v = take(key);
    if (v && !v->is_object()) throw ConfigError(at(key) + " must be a JSON object");
    return v;
  }

  // Raw access for values with bespoke shapes (marks the key consumed).
  const json* any(const char* key) { return take(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!used_.count(key)) throw ConfigError("unknown key \"" + at(key) + "\"");
    }
  }

 private:
  std::string label() const { return path_.empty() ? std::string("document root") : path_; }
  std::string at(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* take(const char* key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// Doubles that might be non-finite are stored as null (the JSON spec has no
// NaN literal) and come back as quiet NaN.
inline json num_or_null(double v) {
  if (std::isfinite(v)) return json(v);
  return json(nullptr);
}

inline json opt_or_null(const std::optional<double>& v) {
  if (v.has_value()) return json(*v);
  return json(nullptr);
}

// Matrix <-> nested arrays (row-major).
inline json mat_json(const Mat& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat mat_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + " must be an array of arrays");
  const int rows = static_cast<int>(j.size());
  if (rows == 0) return Mat(0, 0);
  if (!j[0].is_array()) throw ConfigError(path + " must be an array of arrays");
  const int cols = static_cast<int>(j[0].size());
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const json& row = j[static_cast<size_t>(i)];
    if (!row.is_array() || static_cast<int>(row.size()) != cols)
      throw ConfigError(path + " rows must all have the same length");
    for (int c = 0; c < cols; ++c) {
      const json& e = row[static_cast<size_t>(c)];
      if (!e.is_number()) throw ConfigError(path + " entries must be numbers");
      m(i, c) = e.get<double>();
    }
  }
  return m;
}

}  // namespace cnd::jsonutil
