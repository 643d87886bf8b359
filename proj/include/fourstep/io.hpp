#pragma once

// Columnar text helpers shared by every loader and writer: a small CSV reader
// (RFC 4180 quoting, optional BOM, CRLF tolerant), a writer, and shortest
// round-trip number formatting so persisted artifacts are byte-stable.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "fourstep/error.hpp"

namespace fourstep::io {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error("write failed: " + path.string());
}

// 64-bit FNV-1a, used for artifact version fingerprints.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  if (v == 0.0) return "0";  // also folds -0
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("number formatting failed");
  return std::string(buf, end);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> try_parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> try_parse_int(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Parsed CSV with a header row. Row numbers reported in errors are 1-based
// file lines, counting the header as line 1.
class CsvTable {
 public:
  CsvTable() = default;
  CsvTable(std::string source, std::vector<std::string> header,
           std::vector<std::vector<std::string>> rows, std::vector<std::size_t> lines)
      : source_(std::move(source)), header_(std::move(header)), rows_(std::move(rows)),
        lines_(std::move(lines)) {
    for (std::size_t i = 0; i < header_.size(); ++i) index_.emplace(header_[i], i);
  }

  const std::string& source() const { return source_; }
  const std::vector<std::string>& header() const { return header_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  std::size_t line_of(std::size_t row) const { return lines_.at(row); }

  bool has(std::string_view column) const { return index_.count(std::string(column)) != 0; }

  std::size_t column(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end())
      throw ParseError(source_ + ": missing required column '" + std::string(name) + "'");
    return it->second;
  }

  std::optional<std::size_t> find_column(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::string_view cell(std::size_t row, std::size_t col) const {
    const auto& r = rows_.at(row);
    if (col >= r.size()) return {};
    return trim(r[col]);
  }
  std::string_view cell(std::size_t row, std::string_view name) const { return cell(row, column(name)); }

  double number(std::size_t row, std::size_t col) const {
    auto v = try_parse_double(cell(row, col));
    if (!v) throw error_at(row, "column '" + header_.at(col) + "' is not a number: '" +
                                    std::string(cell(row, col)) + "'");
    return *v;
  }
  double number(std::size_t row, std::string_view name) const { return number(row, column(name)); }

  std::optional<double> optional_number(std::size_t row, std::size_t col) const {
    auto s = cell(row, col);
    if (s.empty()) return std::nullopt;
    return number(row, col);
  }

  long long integer(std::size_t row, std::size_t col) const {
    auto v = try_parse_int(cell(row, col));
    if (!v) throw error_at(row, "column '" + header_.at(col) + "' is not an integer: '" +
                                    std::string(cell(row, col)) + "'");
    return *v;
  }
  long long integer(std::size_t row, std::string_view name) const { return integer(row, column(name)); }

  ParseError error_at(std::size_t row, const std::string& msg) const {
    return ParseError(source_ + ", row " + std::to_string(line_of(row)) + ": " + msg);
  }

 private:
  std::string source_;
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
  std::vector<std::size_t> lines_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline CsvTable parse_csv(std::string_view text, std::string source = "<memory>") {
  if (text.size() >= 3 && static_cast<unsigned char>(text[0]) == 0xEF &&
      static_cast<unsigned char>(text[1]) == 0xBB && static_cast<unsigned char>(text[2]) == 0xBF)
    text.remove_prefix(3);

  std::vector<std::vector<std::string>> records;
  std::vector<std::size_t> lines;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool row_has_content = false;
  std::size_t line = 1;
  std::size_t record_line = 1;

  auto end_record = [&] {
    record.push_back(std::move(field));
    field.clear();
    if (row_has_content || record.size() > 1) {
      records.push_back(std::move(record));
      lines.push_back(record_line);
    }
    record.clear();
    row_has_content = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        row_has_content = true;
        break;
      case ',':
        record.push_back(std::move(field));
        field.clear();
        row_has_content = true;
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        record_line = line;
        break;
      default:
        field.push_back(c);
        if (c != ' ' && c != '\t') row_has_content = true;
    }
  }
  if (in_quotes) throw ParseError(source + ": unterminated quoted field");
  if (row_has_content || !record.empty()) end_record();

  if (records.empty()) throw ParseError(source + ": empty file (header row required)");
  std::vector<std::string> header;
  for (auto& h : records.front()) header.emplace_back(trim(h));
  records.erase(records.begin());
  lines.erase(lines.begin());
  return CsvTable(std::move(source), std::move(header), std::move(records), std::move(lines));
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  return parse_csv(read_file(path), path.string());
}

// Accumulates CSV text. Fields containing separators or quotes are quoted.
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

  CsvWriter& row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_.push_back(',');
      append_field(fields[i]);
    }
    out_.push_back('\n');
    return *this;
  }

  const std::string& str() const { return out_; }
  void save(const std::filesystem::path& path) const { write_file(path, out_); }

 private:
  void append_field(const std::string& f) {
    if (f.find_first_of(",\"\n\r") == std::string::npos) {
      out_ += f;
      return;
    }
    out_.push_back('"');
    for (char c : f) {
      if (c == '"') out_.push_back('"');
      out_.push_back(c);
    }
    out_.push_back('"');
  }

  std::string out_;
};

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace fourstep::io
