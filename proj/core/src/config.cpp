#include "rangediff/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rangediff/errors.hpp"

namespace rangediff {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<KvEntry> parse_kv(std::istream& in, const std::string& source) {
    std::vector<KvEntry> out;
    std::string section;
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw ConfigError(source + ":" + std::to_string(lineno) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        KvEntry e{section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno, source};
        if (e.key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<KvEntry> read_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    return parse_kv(in, path.string());
}

double kv_double(const KvEntry& e) {
    std::istringstream ss(e.value);
    double v;
    if (!(ss >> v) || !(ss >> std::ws).eof() || !std::isfinite(v))
        throw ConfigError(e.where() + ": expected a number, got '" + e.value + "'");
    return v;
}

std::uint64_t kv_uint(const KvEntry& e) {
    std::uint64_t v = 0;
    const auto* end = e.value.data() + e.value.size();
    const auto res = std::from_chars(e.value.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end || e.value.empty())
        throw ConfigError(e.where() + ": expected a non-negative integer, got '" + e.value + "'");
    return v;
}

bool kv_bool(const KvEntry& e) {
    std::string v = e.value;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(e.where() + ": expected a boolean, got '" + e.value + "'");
}

std::vector<std::string> kv_list(const KvEntry& e) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(e.value);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw ConfigError(e.where() + ": empty list element");
        out.push_back(item);
    }
    if (out.empty()) throw ConfigError(e.where() + ": empty list");
    return out;
}

std::vector<std::size_t> kv_uint_list(const KvEntry& e) {
    std::vector<std::size_t> out;
    for (const auto& item : kv_list(e)) {
        KvEntry tmp = e;
        tmp.value = item;
        out.push_back(static_cast<std::size_t>(kv_uint(tmp)));
    }
    return out;
}

}  // namespace rangediff
