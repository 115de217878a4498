#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "autodistil/error.hpp"
#include "autodistil/rational.hpp"

namespace autodistil {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Flat key-value configuration text.
///
///     # comment
///     epochs = 3
///     [subspace.tiny]
///     layers = [4, 7, 1]
///
/// Keys inside a `[section]` are stored as `section.key`. Every key must be
/// consumed by a typed getter; `reject_unknown` reports the first leftover.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string source = "<config>") {
    KeyValueConfig cfg;
    cfg.source_ = std::move(source);
    std::string section;
    int line_no = 0;
    for (auto raw : detail::split(text, '\n')) {
      ++line_no;
      if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
      const auto line = detail::trim(raw);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']' || line.size() < 3)
          throw ValidationError(cfg.where(line_no) + ": malformed section header '" + std::string(line) + "'");
        section = std::string(detail::trim(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ValidationError(cfg.where(line_no) + ": expected 'key = value', got '" + std::string(line) + "'");
      std::string key(detail::trim(line.substr(0, eq)));
      if (key.empty()) throw ValidationError(cfg.where(line_no) + ": empty key");
      if (!section.empty()) key = section + "." + key;
      auto value = detail::trim(line.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      if (!cfg.values_.emplace(key, Entry{std::string(value), line_no}).second)
        throw ValidationError(cfg.where(line_no) + ": duplicate key '" + key + "'");
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  /// Marks the key consumed and returns its raw text.
  std::optional<std::string> take(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_.insert(key);
    return it->second.value;
  }

  std::string get_string(const std::string& key, std::string fallback) const {
    auto v = take(key);
    return v ? *v : fallback;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto v = take(key);
    if (!v) return fallback;
    auto r = Rational::parse(*v);
    if (!r || !r->is_integer()) throw ValidationError(bad_value(key, *v, "an integer"));
    return r->num();
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    auto v = take(key);
    if (!v) return fallback;
    std::uint64_t out = 0;
    if (v->empty()) throw ValidationError(bad_value(key, *v, "an unsigned integer"));
    for (char c : *v) {
      if (c < '0' || c > '9') throw ValidationError(bad_value(key, *v, "an unsigned integer"));
      out = out * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return out;
  }

  double get_real(const std::string& key, double fallback) const {
    auto v = take(key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const double d = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw ValidationError(bad_value(key, *v, "a real number"));
    }
  }

  /// Parses `[lo, hi, step]`.
  std::optional<std::array<Rational, 3>> get_triple(const std::string& key) const {
    auto v = take(key);
    if (!v) return std::nullopt;
    auto body = detail::trim(*v);
    if (body.size() < 2 || body.front() != '[' || body.back() != ']')
      throw ValidationError(bad_value(key, *v, "'[lo, hi, step]'"));
    auto parts = detail::split(body.substr(1, body.size() - 2), ',');
    if (parts.size() != 3) throw ValidationError(bad_value(key, *v, "three values '[lo, hi, step]'"));
    std::array<Rational, 3> out;
    for (std::size_t i = 0; i < 3; ++i) {
      auto r = Rational::parse(detail::trim(parts[i]));
      if (!r) throw ValidationError(bad_value(key, *v, "numeric range entries"));
      out[i] = *r;
    }
    return out;
  }

  /// Names `x` of every section `[prefix.x]` (keys shaped `prefix.x.key`).
  std::vector<std::string> section_names(const std::string& prefix) const {
    std::set<std::string> names;
    const std::string head = prefix + ".";
    for (const auto& [key, entry] : values_) {
      if (key.rfind(head, 0) != 0) continue;
      const auto rest = key.substr(head.size());
      const auto dot = rest.find('.');
      if (dot != std::string::npos) names.insert(rest.substr(0, dot));
    }
    return {names.begin(), names.end()};
  }

  void reject_unknown() const {
    for (const auto& [key, entry] : values_)
      if (!used_.count(key)) throw ValidationError(where(entry.line) + ": unknown key '" + key + "'");
  }

  const std::string& source() const noexcept { return source_; }

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };

  std::string where(int line) const { return source_ + ":" + std::to_string(line); }
  std::string bad_value(const std::string& key, const std::string& value, const char* expected) const {
    auto it = values_.find(key);
    return where(it == values_.end() ? 0 : it->second.line) + ": key '" + key + "' expects " + expected + ", got '" +
           value + "'";
  }

  std::string source_;
  std::map<std::string, Entry> values_;
  mutable std::set<std::string> used_;
};

}  // namespace autodistil
