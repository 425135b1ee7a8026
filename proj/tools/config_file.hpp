#pragma once

// Minimal sectioned key = value config reader. Sections in brackets, one
// key = value pair per line, # or ; comments, optional double quotes around
// strings, comma lists for multi-valued keys. Unknown keys are reported at
// the end of resolution so typos fail loudly.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "autolora/errors.hpp"

namespace autolora::cli {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

}  // namespace detail

class ConfigFile {
public:
    ConfigFile() = default;

    static ConfigFile load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path.string());
        ConfigFile cfg;
        cfg.path_ = path.string();
        std::string line;
        std::string section;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto comment = line.find_first_of("#;");
            if (comment != std::string::npos) line = line.substr(0, comment);
            line = detail::trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') {
                    throw ConfigError(cfg.path_ + ":" + std::to_string(line_no) +
                                      ": unterminated section header");
                }
                section = detail::trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(cfg.path_ + ":" + std::to_string(line_no) +
                                  ": expected key = value");
            }
            std::string key = detail::trim(line.substr(0, eq));
            std::string value = detail::trim(line.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError(cfg.path_ + ":" + std::to_string(line_no) + ": empty key");
            }
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
                value = value.substr(1, value.size() - 2);
            }
            const std::string full = section.empty() ? key : section + "." + key;
            if (!cfg.values_.emplace(full, value).second) {
                throw ConfigError(cfg.path_ + ":" + std::to_string(line_no) +
                                  ": duplicate key " + full);
            }
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return it->second;
    }

    double get_number(const std::string& key, double fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError(path_ + ": key " + key + ": not a number: '" + it->second + "'");
        }
    }

    std::int64_t get_int(const std::string& key, std::int64_t fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        try {
            std::size_t used = 0;
            const long long v = std::stoll(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError(path_ + ": key " + key + ": not an integer: '" + it->second + "'");
        }
    }

    bool get_flag(const std::string& key, bool fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError(path_ + ": key " + key + ": expected true/false, got '" + it->second +
                          "'");
    }

    std::vector<std::size_t> get_sizes(const std::string& key,
                                       const std::vector<std::size_t>& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        std::vector<std::size_t> out;
        std::stringstream ss(it->second);
        std::string field;
        while (std::getline(ss, field, ',')) {
            field = detail::trim(field);
            try {
                out.push_back(static_cast<std::size_t>(std::stoull(field)));
            } catch (const std::exception&) {
                throw ConfigError(path_ + ": key " + key + ": bad list entry '" + field + "'");
            }
        }
        if (out.empty()) throw ConfigError(path_ + ": key " + key + ": empty list");
        return out;
    }

    /// Rejects keys that no resolver consumed.
    void finish() const {
        for (const auto& [key, value] : values_) {
            if (!consumed_.count(key)) {
                throw ConfigError(path_ + ": unknown key " + key);
            }
        }
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace autolora::cli
