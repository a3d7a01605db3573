#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "rangediff/errors.hpp"

namespace rangediff::io {

/// Little-endian byte sink.
class ByteWriter {
public:
    template <class T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        U bits;
        std::memcpy(&bits, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    const std::vector<char>& bytes() const { return bytes_; }
    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!out) throw IoError("failed writing '" + path.string() + "'");
    }

private:
    std::vector<char> bytes_;
};

/// Little-endian byte source over a whole file; every read is bounds-checked.
class ByteReader {
public:
    explicit ByteReader(const std::filesystem::path& path) : path_(path.string()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open '" + path_ + "'");
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    T get() {
        need(sizeof(T));
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            bits |= static_cast<U>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        T value;
        std::memcpy(&value, &bits, sizeof(T));
        return value;
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void expect_magic(std::string_view magic) {
        if (bytes_.size() < magic.size() || get_bytes(magic.size()) != magic)
            throw IoError("'" + path_ + "' is not a " + std::string(magic) + " file (bad magic)");
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw IoError("'" + path_ + "' is truncated");
    }
    std::string path_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace rangediff::io
