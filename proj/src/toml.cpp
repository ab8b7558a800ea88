#include "dtl/toml.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace dtl {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// strips a trailing comment that is not inside a quoted string
std::string strip_comment(const std::string& s) {
    bool in_str = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') in_str = !in_str;
        if (s[i] == '#' && !in_str) return s.substr(0, i);
    }
    return s;
}

}  // namespace

TomlDoc TomlDoc::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("toml: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str(), path);
}

TomlDoc TomlDoc::parse_string(const std::string& text, const std::string& origin) {
    TomlDoc doc;
    doc.origin_ = origin;
    std::istringstream in(text);
    std::string line, section;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("toml: " + origin + ":" + std::to_string(lineno) + ": " + why);
        };
        if (line.front() == '[') {
            if (line.back() != ']') fail("unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) fail("empty section name");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) fail("expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty()) fail("empty key");
        if (val.empty()) fail("empty value for key " + key);
        std::string path = section.empty() ? key : section + "." + key;
        if (doc.values_.count(path)) fail("duplicate key " + path);
        bool quoted = val.size() >= 2 && val.front() == '"' && val.back() == '"';
        if (quoted) val = val.substr(1, val.size() - 2);
        doc.values_[path] = val;
        doc.is_string_[path] = quoted;
    }
    return doc;
}

const std::string& TomlDoc::raw_at(const std::string& path) const {
    auto it = values_.find(path);
    if (it == values_.end())
        throw std::runtime_error("toml: " + origin_ + ": missing key " + path);
    return it->second;
}

std::string TomlDoc::get_string(const std::string& path) const { return raw_at(path); }

long TomlDoc::get_int(const std::string& path) const {
    const std::string& v = raw_at(path);
    std::size_t pos = 0;
    long out = 0;
    try {
        out = std::stol(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size())
        throw std::runtime_error("toml: " + origin_ + ": key " + path + " is not an integer: " + v);
    return out;
}

double TomlDoc::get_double(const std::string& path) const {
    const std::string& v = raw_at(path);
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size())
        throw std::runtime_error("toml: " + origin_ + ": key " + path + " is not a number: " + v);
    return out;
}

bool TomlDoc::get_bool(const std::string& path) const {
    const std::string& v = raw_at(path);
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::runtime_error("toml: " + origin_ + ": key " + path + " is not a bool: " + v);
}

std::vector<std::string> TomlDoc::missing(const std::vector<std::string>& required) const {
    std::vector<std::string> out;
    for (const std::string& p : required)
        if (!has(p)) out.push_back(p);
    return out;
}

}  // namespace dtl
