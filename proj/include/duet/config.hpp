#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "duet/common.hpp"

namespace duet {

// Flat key = value configuration with CLI overrides (an override wins over
// the file). Canonical text is sorted, which makes the digest stable.
class KVConfig {
public:
    static KVConfig parse_text(const std::string& text) {
        KVConfig cfg;
        std::istringstream in(text);
        std::string line;
        int64_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                const auto b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            DUET_CHECK(eq != std::string::npos, "config: line ", line_no,
                       " is not 'key = value': ", line);
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            DUET_CHECK(!key.empty(), "config: empty key at line ", line_no);
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static KVConfig parse_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        DUET_CHECK(in.good(), "config: cannot read ", path);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str());
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback = "") const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string require_str(const std::string& key) const {
        auto it = values_.find(key);
        DUET_CHECK(it != values_.end(), "config: missing required key '", key, "'");
        return it->second;
    }

    int64_t get_int(const std::string& key, int64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (...) {
            fail("config: key '", key, "' is not an integer: ", it->second);
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (...) {
            fail("config: key '", key, "' is not a number: ", it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        fail("config: key '", key, "' is not a boolean: ", v);
    }

    uint64_t get_u64(const std::string& key, uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoull(it->second);
        } catch (...) {
            fail("config: key '", key, "' is not an unsigned integer: ", it->second);
        }
    }

    std::string canonical_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    uint64_t digest() const {
        const std::string text = canonical_text();
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : text) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace duet
