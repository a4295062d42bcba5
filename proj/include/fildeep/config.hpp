#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fildeep/errors.hpp"

namespace fildeep {

/// Flat key/value configuration. Accepts `key = value` lines (with `#`
/// comments) or a flat JSON object. Values stay strings until read.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(const std::string& text) {
        KeyValueConfig cfg;
        const auto first = text.find_first_not_of(" \t\r\n");
        if (first != std::string::npos && text[first] == '{') {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(text);
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError(std::string("invalid JSON config: ") + e.what());
            }
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (it->is_string()) cfg.set(it.key(), it->get<std::string>());
                else if (it->is_array()) {
                    std::string joined;
                    for (std::size_t i = 0; i < it->size(); ++i) {
                        if (i) joined += ',';
                        joined += (*it)[i].dump();
                    }
                    cfg.set(it.key(), joined);
                } else cfg.set(it.key(), it->dump());
            }
            return cfg;
        }
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            const auto eq = line.find('=');
            if (trim(line).empty()) continue;
            if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
            cfg.set(key, trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& entries() const { return values_; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return to_double(key, it->second);
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' expects an integer, got '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("key '" + key + "' expects a boolean, got '" + v + "'");
    }

    /// `lo,hi` pair; a single number means a degenerate range.
    std::pair<double, double> get_range(const std::string& key, std::pair<double, double> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto parts = split(it->second);
        if (parts.size() == 1) {
            const double v = to_double(key, parts[0]);
            return {v, v};
        }
        if (parts.size() != 2) throw ConfigError("key '" + key + "' expects 'lo,hi'");
        const double lo = to_double(key, parts[0]), hi = to_double(key, parts[1]);
        if (hi < lo) throw ConfigError("key '" + key + "' has hi < lo");
        return {lo, hi};
    }

    std::vector<long long> get_int_list(const std::string& key, std::vector<long long> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<long long> out;
        for (const auto& p : split(it->second)) out.push_back(static_cast<long long>(to_double(key, p)));
        return out;
    }

    /// Rejects keys outside `known`.
    void require_known(const std::set<std::string>& known) const {
        for (const auto& [k, v] : values_)
            if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }

    std::string dump() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
        return s;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : values_) j[k] = v;
        return j;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream is(s);
        while (std::getline(is, cur, ',')) out.push_back(trim(cur));
        return out;
    }

    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return d;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
        }
    }

    std::map<std::string, std::string> values_;
};

} // namespace fildeep
