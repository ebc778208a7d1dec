#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "slm/types.hpp"

namespace slm::io {

/// Shortest round-trip text for a double ("nan"/"inf" for non-finite values).
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// RFC 4180 field quoting: fields containing a comma, quote or line break are quoted and
/// embedded quotes doubled.
inline std::string quote_field(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvRow {
 public:
  CsvRow& add(const std::string& s) {
    fields_.push_back(quote_field(s));
    return *this;
  }
  CsvRow& add(const char* s) { return add(std::string(s)); }
  CsvRow& add(double v) {
    fields_.push_back(format_double(v));
    return *this;
  }
  CsvRow& add(int v) {
    fields_.push_back(std::to_string(v));
    return *this;
  }
  CsvRow& add(long long v) {
    fields_.push_back(std::to_string(v));
    return *this;
  }
  CsvRow& add(unsigned long long v) {
    fields_.push_back(std::to_string(v));
    return *this;
  }
  CsvRow& add(unsigned long v) { return add(static_cast<unsigned long long>(v)); }
  CsvRow& add(bool v) {
    fields_.push_back(v ? "1" : "0");
    return *this;
  }
  template <typename T>
  CsvRow& add(const std::optional<T>& v) {
    if (v) return add(*v);
    fields_.emplace_back();
    return *this;
  }

  std::string str() const {
    std::string line;
    for (std::size_t i = 0; i < fields_.size(); ++i) {
      if (i) line += ',';
      line += fields_[i];
    }
    return line;
  }

 private:
  std::vector<std::string> fields_;
};

/// Line-oriented CSV file with CRLF-free "\n" endings.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::initializer_list<std::string> header)
      : CsvWriter(path, std::vector<std::string>(header)) {}

  CsvWriter(const std::string& path, const std::vector<std::string>& header) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
    CsvRow h;
    for (const auto& name : header) h.add(name);
    write(h);
  }

  void write(const CsvRow& row) {
    out_ << row.str() << '\n';
    if (!out_) throw Error(ErrorKind::Io, "write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace slm::io
