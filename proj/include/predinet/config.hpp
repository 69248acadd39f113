#pragma once

// Flat key=value text with [section] headers. '#' and ';' start comments.
// Keys inside a section are addressed as "section.key".

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "predinet/errors.hpp"

namespace predinet {

class Config {
 public:
  static Config parse(std::istream& in, const std::string& source = "<config>") {
    Config c;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto cut = line.find_first_of("#;");
      if (cut != std::string::npos) line.erase(cut);
      line = trim(line);
      if (line.empty()) continue;
      auto where = [&] { return source + ":" + std::to_string(lineno) + ": "; };
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError(where() + "empty section name");
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
      auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(where() + "empty key");
      if (!section.empty()) key = section + "." + key;
      if (c.values_.count(key)) throw ConfigError(where() + "duplicate key " + key);
      c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    return parse(in, path);
  }

  /// Applies "key=value" overrides on top of the file contents.
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key " + key);
    used_.insert(key);
    return it->second;
  }
  std::string get(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  template <class N>
  N number(const std::string& key) const {
    const auto s = get(key);
    N v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("config key " + key + ": bad number '" + s + "'");
    return v;
  }
  template <class N>
  N number(const std::string& key, N fallback) const {
    return has(key) ? number<N>(key) : fallback;
  }

  /// Comma-separated list; empty entries dropped.
  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  /// Keys never read through get(); useful for catching typos.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical text: top-level keys, then sorted keys grouped by section.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_)
      if (k.find('.') == std::string::npos) os << k << " = " << v << "\n";
    std::string current;
    for (const auto& [k, v] : values_) {
      auto dot = k.find('.');
      if (dot == std::string::npos) continue;
      std::string section = k.substr(0, dot);
      std::string key = k.substr(dot + 1);
      if (section != current) {
        os << "[" << section << "]\n";
        current = section;
      }
      os << key << " = " << v << "\n";
    }
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    auto b = std::find_if_not(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
    auto e = std::find_if_not(s.rbegin(), s.rend(), [](unsigned char c) { return std::isspace(c); }).base();
    return b < e ? std::string(b, e) : std::string();
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace predinet
