#pragma once

// Minimal RFC 4180 CSV reading/writing with line/column positions for error
// reporting, plus shortest round-trip number formatting.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstddef>
#include <istream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "kmlead/core.hpp"

namespace kmlead::csv {

struct Field {
    std::string text;
    std::size_t column = 1;  // 1-based byte column of the field start
};

struct Row {
    std::vector<Field> fields;
    std::size_t line = 0;
};

// Splits one physical line. Quoted fields may not span lines (none of our
// formats need that).
inline Row split_line(std::string_view line, std::size_t line_no, const std::string& file) {
    Row row;
    row.line = line_no;
    std::size_t i = 0;
    while (true) {
        Field f;
        f.column = i + 1;
        if (i < line.size() && line[i] == '"') {
            ++i;
            while (true) {
                if (i >= line.size()) throw ParseError(file, line_no, f.column, "unterminated quote");
                if (line[i] == '"') {
                    if (i + 1 < line.size() && line[i + 1] == '"') {
                        f.text.push_back('"');
                        i += 2;
                        continue;
                    }
                    ++i;
                    break;
                }
                f.text.push_back(line[i++]);
            }
            if (i < line.size() && line[i] != ',')
                throw ParseError(file, line_no, i + 1, "unexpected character after quoted field");
        } else {
            while (i < line.size() && line[i] != ',') f.text.push_back(line[i++]);
        }
        row.fields.push_back(std::move(f));
        if (i >= line.size()) break;
        ++i;  // comma
    }
    return row;
}

struct Document {
    std::vector<std::string> header;
    std::vector<Row> rows;
};

// Reads a file that must begin with the schema comment line, then a header
// row. Blank lines are skipped. CRLF is rejected: formats are LF-only.
inline Document read(std::istream& in, const std::string& file,
                     const std::vector<std::string>& expected_header) {
    Document doc;
    std::string line;
    std::size_t line_no = 0;

    if (!std::getline(in, line)) throw SchemaError(file + ": empty file, expected '" + kSchemaTag + "'");
    ++line_no;
    if (line.rfind("# km-lead", 0) != 0)
        throw SchemaError(file + ": missing schema header '" + std::string(kSchemaTag) + "'");
    if (line != kSchemaTag)
        throw SchemaError(file + ": schema version mismatch: '" + line + "' (expected '" +
                          kSchemaTag + "')");

    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            throw ParseError(file, line_no, line.size(), "CR line ending; files must use LF");
        if (line.empty()) continue;
        Row row = split_line(line, line_no, file);
        if (!have_header) {
            for (auto& f : row.fields) doc.header.push_back(f.text);
            if (doc.header != expected_header) {
                std::string want;
                for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
                throw ParseError(file, line_no, 1, "header must be '" + want + "'");
            }
            have_header = true;
            continue;
        }
        if (row.fields.size() != expected_header.size()) {
            throw ParseError(file, line_no, 1,
                             "expected " + std::to_string(expected_header.size()) + " fields, got " +
                                 std::to_string(row.fields.size()));
        }
        doc.rows.push_back(std::move(row));
    }
    if (!have_header) throw ParseError(file, line_no, 1, "missing header row");
    return doc;
}

inline double to_double(const Field& f, std::size_t line, const std::string& file) {
    double v = 0.0;
    const char* b = f.text.data();
    const char* e = b + f.text.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e || f.text.empty() || !std::isfinite(v))
        throw ParseError(file, line, f.column, "not a number: '" + f.text + "'");
    return v;
}

inline long to_long(const Field& f, std::size_t line, const std::string& file) {
    long v = 0;
    const char* b = f.text.data();
    const char* e = b + f.text.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e || f.text.empty())
        throw ParseError(file, line, f.column, "not an integer: '" + f.text + "'");
    return v;
}

inline std::optional<double> to_optional_double(const Field& f, std::size_t line,
                                                const std::string& file) {
    if (f.text.empty()) return std::nullopt;
    return to_double(f, line, file);
}

// Shortest representation that parses back to exactly v.
inline std::string format_number(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline double parse_number(std::string_view s) {
    double v = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

// Writes `prob` as the shortest percentage string p with parse(p) / 100 ==
// prob. When no double percentage divides back exactly, falls back to 21
// significant digits of prob * 100 in extended precision, which
// parse_percent reads back exactly.
inline std::string format_percent(double prob) {
    double pct = prob * 100.0;
    std::string best = format_number(pct);
    if (parse_number(best) / 100.0 == prob) return best;
    double lo = pct, hi = pct;
    for (int k = 0; k < 8; ++k) {
        lo = std::nextafter(lo, -std::numeric_limits<double>::infinity());
        hi = std::nextafter(hi, std::numeric_limits<double>::infinity());
        for (double c : {lo, hi}) {
            auto s = format_number(c);
            if (parse_number(s) / 100.0 == prob) return s;
        }
    }
    if constexpr (std::numeric_limits<long double>::digits >= 60) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.20Le", static_cast<long double>(prob) * 100.0L);
        return buf;
    }
    return best;
}

inline std::size_t significant_digits(std::string_view s) {
    std::size_t n = 0;
    bool leading = true;
    for (char c : s) {
        if (c == 'e' || c == 'E') break;
        if (c < '0' || c > '9') continue;
        if (leading && c == '0') continue;
        leading = false;
        ++n;
    }
    return n;
}

// Inverse of format_percent.
inline double percent_to_prob(std::string_view s) {
    if (significant_digits(s) <= 17) return parse_number(s) / 100.0;
    const std::string text(s);
    return static_cast<double>(std::strtold(text.c_str(), nullptr) / 100.0L);
}

inline std::string quote(std::string_view s) {
    bool needs = s.find_first_of(",\"\n\r") != std::string_view::npos ||
                 (!s.empty() && (s.front() == ' ' || s.back() == ' '));
    if (!needs) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += '"';
    return out;
}

inline std::string header_line(const std::vector<std::string>& cols) {
    std::string out;
    for (const auto& c : cols) out += (out.empty() ? "" : ",") + c;
    return out + "\n";
}

}  // namespace kmlead::csv
