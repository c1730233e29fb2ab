#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"

namespace flowrl {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Flat key/value settings file. Each non-comment line reads
//   section.key = value
// with '#' starting a comment. Keys must belong to the known-key set supplied
// at load time; anything else is rejected so typos surface immediately.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path,
                          const std::set<std::string>& known_keys) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("config file not found: " + path);
    std::ostringstream raw;
    raw << in.rdbuf();
    Config cfg = from_string(raw.str(), known_keys, path);
    cfg.raw_text_ = raw.str();
    return cfg;
  }

  static Config from_string(const std::string& text,
                            const std::set<std::string>& known_keys,
                            const std::string& origin = "<string>") {
    Config cfg;
    cfg.raw_text_ = text;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'section.key = value', got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty() || key.find('.') == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": key must look like 'section.key', got '" + key + "'");
      if (!known_keys.empty() && !known_keys.count(key))
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": unknown key '" + key + "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  [[nodiscard]] bool has(const std::string& key) const {
    return values_.count(key) > 0;
  }

  [[nodiscard]] std::string get_string(const std::string& key,
                                       const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing junk");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a number, got '" +
                        it->second + "'");
    }
  }

  [[nodiscard]] std::int64_t get_int(const std::string& key,
                                     std::int64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const std::int64_t v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing junk");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected an integer, got '" +
                        it->second + "'");
    }
  }

  [[nodiscard]] std::vector<std::int64_t> get_int_list(
      const std::string& key, const std::vector<std::int64_t>& fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::int64_t> out;
    for (const auto& tok : split(it->second, ',')) {
      try {
        out.push_back(std::stoll(tok));
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected integers, got '" + tok + "'");
      }
    }
    return out;
  }

  [[nodiscard]] std::vector<std::string> get_string_list(
      const std::string& key, const std::vector<std::string>& fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return split(it->second, ',');
  }

  [[nodiscard]] const std::string& raw_text() const { return raw_text_; }

  [[nodiscard]] const std::map<std::string, std::string>& values() const {
    return values_;
  }

 private:
  std::map<std::string, std::string> values_;
  std::string raw_text_;
};

// FNV-1a over the raw config bytes; recorded in run manifests so a run can be
// matched to the exact configuration that produced it.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

}  // namespace flowrl
