#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dwstrack/common.hpp"

namespace dwstrack {

/// Ordered key = value store backing config files, motion profiles, run
/// manifests and checkpoint headers. Duplicate keys are allowed and preserved
/// in order (used e.g. for repeated `segment` entries). Lines starting with
/// '#' are comments; a bare first line without '=' is treated as a format tag.
class KeyValue {
 public:
  void set(const std::string& key, const std::string& value) {
    for (auto& kv : items_) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    items_.emplace_back(key, value);
  }

  void append(const std::string& key, const std::string& value) { items_.emplace_back(key, value); }

  bool has(const std::string& key) const {
    for (const auto& kv : items_)
      if (kv.first == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& kv : items_)
      if (kv.first == key) return kv.second;
    throw ParseError("missing key '" + key + "'");
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    for (const auto& kv : items_)
      if (kv.first == key) return kv.second;
    return fallback;
  }

  std::vector<std::string> get_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& kv : items_)
      if (kv.first == key) out.push_back(kv.second);
    return out;
  }

  double get_double(const std::string& key) const { return parse_double(get(key), key); }
  double get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }
  int64_t get_int(const std::string& key) const { return parse_int(get(key), key); }
  int64_t get_int_or(const std::string& key, int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
  }
  bool get_bool_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ParseError("key '" + key + "': expected boolean, got '" + v + "'");
  }

  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

  std::string format_tag;  // optional first line, e.g. "dwstrack-manifest v1"

  std::string serialize() const {
    std::ostringstream os;
    if (!format_tag.empty()) os << format_tag << "\n";
    for (const auto& kv : items_) os << kv.first << " = " << kv.second << "\n";
    return os.str();
  }

  static KeyValue parse(const std::string& text, const std::string& origin = "<string>") {
    KeyValue kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    bool first = true;
    while (std::getline(is, line)) {
      ++lineno;
      std::string trimmed = trim(line);
      if (trimmed.empty() || trimmed[0] == '#') {
        first = false;
        continue;
      }
      auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        if (first) {
          kv.format_tag = trimmed;
          first = false;
          continue;
        }
        throw ParseError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" +
                         trimmed + "'");
      }
      first = false;
      std::string key = trim(trimmed.substr(0, eq));
      std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
      kv.append(key, value);
    }
    return kv;
  }

  static KeyValue load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str(), path);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write file: " + path);
    out << serialize();
    if (!out) throw IoError("write failed: " + path);
  }

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  static double parse_double(const std::string& s, const std::string& what) {
    try {
      size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ParseError("key '" + what + "': expected number, got '" + s + "'");
    }
  }

  static int64_t parse_int(const std::string& s, const std::string& what) {
    try {
      size_t pos = 0;
      long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ParseError("key '" + what + "': expected integer, got '" + s + "'");
    }
  }

  /// Splits a whitespace-separated list of numbers ("2 2 2 2").
  static std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(parse_double(tok, what));
    return out;
  }

  static std::vector<int64_t> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int64_t> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(parse_int(tok, what));
    return out;
  }

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

/// Shortest decimal form that round-trips a double exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    for (int prec = 1; prec <= 16; ++prec) {
      char shorter[40];
      std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
      std::sscanf(shorter, "%lf", &back);
      if (back == v) return shorter;
    }
  }
  return buf;
}

}  // namespace dwstrack
