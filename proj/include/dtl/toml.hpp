#pragma once

// Minimal TOML subset reader for run configs: [section] headers, scalar
// key = value lines (string, integer, float, bool), and # comments. Values
// are addressed as "section.key"; typed getters convert on demand and report
// failures with the full path.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtl {

class TomlDoc {
  public:
    static TomlDoc parse_file(const std::string& path);
    static TomlDoc parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& path) const { return values_.count(path) != 0; }

    std::string get_string(const std::string& path) const;
    long get_int(const std::string& path) const;
    double get_double(const std::string& path) const;
    bool get_bool(const std::string& path) const;

    std::string get_string(const std::string& path, const std::string& fallback) const {
        return has(path) ? get_string(path) : fallback;
    }
    long get_int(const std::string& path, long fallback) const {
        return has(path) ? get_int(path) : fallback;
    }
    double get_double(const std::string& path, double fallback) const {
        return has(path) ? get_double(path) : fallback;
    }
    bool get_bool(const std::string& path, bool fallback) const {
        return has(path) ? get_bool(path) : fallback;
    }

    // paths in `required` that are absent, for itemized config errors
    std::vector<std::string> missing(const std::vector<std::string>& required) const;

    const std::map<std::string, std::string>& raw() const { return values_; }

  private:
    // path -> raw value text (strings already unquoted)
    std::map<std::string, std::string> values_;
    std::map<std::string, bool> is_string_;
    std::string origin_;

    const std::string& raw_at(const std::string& path) const;
};

}  // namespace dtl
