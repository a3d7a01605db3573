#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>
#include <vector>

namespace rangediff {

/// One "key = value" line, with the "[section]" it appeared under.
struct KvEntry {
    std::string section;
    std::string key;
    std::string value;
    std::size_t line = 0;
    std::string source;

    std::string where() const { return source + ":" + std::to_string(line) + " (" + key + ")"; }
};

/// Line-based "key = value" format. '#' starts a comment; "[name]" opens a section.
std::vector<KvEntry> parse_kv(std::istream& in, const std::string& source);
std::vector<KvEntry> read_kv_file(const std::filesystem::path& path);

double kv_double(const KvEntry& e);
std::uint64_t kv_uint(const KvEntry& e);
bool kv_bool(const KvEntry& e);
std::vector<std::string> kv_list(const KvEntry& e);
std::vector<std::size_t> kv_uint_list(const KvEntry& e);

}  // namespace rangediff
