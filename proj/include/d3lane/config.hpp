#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "d3lane/error.hpp"

namespace d3l {

// Flat key = value document. Lines starting with '#' are comments;
// `include <path>` pulls in another document (relative to the including
// file), and later keys override earlier ones.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::filesystem::path& base_dir = ".", int depth = 0) {
    if (depth > 16) throw ConfigError("include", "include depth exceeds 16");
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto s = trim(line);
      if (s.empty() || s[0] == '#') continue;
      if (s.rfind("include ", 0) == 0) {
        auto rel = trim(s.substr(8));
        auto path = base_dir / rel;
        cfg.merge(load(path, depth + 1));
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
      auto key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
      cfg.values_[key] = trim(s.substr(eq + 1));
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path, int depth = 0) {
    std::ifstream f(path);
    if (!f) throw ConfigError("include", "cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.parent_path(), depth);
  }

  void merge(const Config& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  template <class T>
  void set(const std::string& key, const T& value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    values_[key] = os.str();
  }

  template <class T>
  T get(const std::string& key, const T& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return convert<T>(key, it->second);
  }

  template <class T>
  T require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(key, "missing");
    return convert<T>(key, it->second);
  }

  // Comma separated list.
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      auto t = trim(item);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

  // Keys under `prefix.`, with the prefix stripped.
  Config subtree(const std::string& prefix) const {
    Config out;
    const auto p = prefix + ".";
    for (const auto& [k, v] : values_)
      if (k.rfind(p, 0) == 0) out.values_[k.substr(p.size())] = v;
    return out;
  }

  Config prefixed(const std::string& prefix) const {
    Config out;
    for (const auto& [k, v] : values_) out.values_[prefix + "." + k] = v;
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  bool operator==(const Config&) const = default;

  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  template <class T>
  static T convert(const std::string& key, const std::string& raw) {
    if constexpr (std::is_same_v<T, std::string>) {
      return raw;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (raw == "1" || raw == "true" || raw == "on" || raw == "yes") return true;
      if (raw == "0" || raw == "false" || raw == "off" || raw == "no") return false;
      throw ConfigError(key, "not a boolean: '" + raw + "'");
    } else {
      std::istringstream is(raw);
      T v{};
      is >> v;
      if (is.fail() || !(is >> std::ws).eof()) throw ConfigError(key, "cannot parse '" + raw + "'");
      return v;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace d3l
