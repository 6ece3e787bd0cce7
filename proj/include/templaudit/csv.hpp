#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "templaudit/errors.hpp"

// Minimal comma-separated text helpers shared by every file format. Fields are
// never quoted; identifiers containing commas are not supported.
namespace templaudit::csv {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        out.emplace_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return value;
}

template <class Int>
std::optional<Int> parse_int(std::string_view s) {
    s = trim(s);
    Int value{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return value;
}

/// Shortest text that parses back to exactly `value`.
inline std::string format_double(double value) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

/// Fixed-precision rendering for report tables.
inline std::string format_fixed(double value, int digits = 6) {
    char buf[64];
    const auto [ptr, ec] =
        std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::fixed, digits);
    return std::string(buf, ptr);
}

/// Line reader that tracks 1-based line numbers and skips blank lines.
class LineReader {
public:
    explicit LineReader(const std::filesystem::path& path) : path_(path), in_(path) {
        if (!in_) throw ParseError(path.string() + ": cannot open file");
    }

    bool next(std::string& line) {
        while (std::getline(in_, line)) {
            ++line_no_;
            if (!trim(line).empty()) return true;
        }
        return false;
    }

    std::size_t line_no() const noexcept { return line_no_; }

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(path_.string() + ":" + std::to_string(line_no_) + ": " + what);
    }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::size_t line_no_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path.string() + ": cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(path.string() + ": cannot open for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(path.string() + ": write failed");
}

}  // namespace templaudit::csv
