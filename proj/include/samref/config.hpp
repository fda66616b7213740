#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace samref {

/// Flat `key = value` configuration. `#` starts a comment; blank lines are
/// ignored; later assignments win. Values are kept as text and converted on
/// access, so typos surface as Config errors naming the key.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws Config listing every key outside `known`.
  void require_known(const std::set<std::string>& known) const;
  /// Canonical text form (sorted keys), parseable by parse().
  std::string to_text() const;
  /// Overlays `other` onto this config.
  void merge(const KeyValueConfig& other);

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace samref
