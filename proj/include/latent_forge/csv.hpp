#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "common.hpp"
#include "error.hpp"

namespace latent_forge {

/// Shortest round-trip decimal form; "nan"/"inf" for non-finite values.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw FormatError(context + ": '" + std::string(s) + "' is not a number");
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw FormatError("CSV is missing column '" + name + "'");
    }
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

/// Plain comma-separated values without quoting.
inline CsvTable read_csv(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("CSV not found: " + path.string());
    std::istringstream in(read_text_file(path));
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (t.header.empty()) {
            t.header = std::move(fields);
            continue;
        }
        if (fields.size() != t.header.size())
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(t.header.size()) + " fields");
        t.rows.push_back(std::move(fields));
    }
    if (t.header.empty()) throw FormatError(path.string() + " has no header");
    return t;
}

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { append(header); }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != columns_) throw ShapeError("CSV row has the wrong number of fields");
        append(fields);
    }

    const std::string& text() const { return text_; }
    void save(const std::filesystem::path& path) const { write_text_file(path, text_); }

private:
    void append(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) text_ += ',';
            text_ += fields[i];
        }
        text_ += '\n';
    }

    std::size_t columns_;
    std::string text_;
};

}  // namespace latent_forge
