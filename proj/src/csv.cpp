#include "deepterra/csv.hpp"

#include "deepterra/error.hpp"

#include <cmath>
#include <cstdio>

namespace deepterra::csv {

std::string escape(std::string_view field)
{
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string format_row(const Row& row)
{
  std::string out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    out += escape(row[i]);
  }
  out += "\r\n";
  return out;
}

std::vector<Row> parse(std::string_view text)
{
  std::vector<Row> rows;
  Row row;
  std::string cur;
  bool in_quotes = false;
  bool row_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        row_started = true;
        break;
      case ',':
        row.push_back(std::move(cur));
        cur.clear();
        row_started = true;
        break;
      case '\r':
        break;
      case '\n':
        row.push_back(std::move(cur));
        cur.clear();
        rows.push_back(std::move(row));
        row.clear();
        row_started = false;
        break;
      default:
        cur += c;
        row_started = true;
    }
  }
  if (in_quotes) fail(ErrorKind::Domain, "unterminated quoted CSV field");
  if (row_started || !row.empty()) {
    row.push_back(std::move(cur));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fixed(double v, int decimals)
{
  const double scale = std::pow(10.0, decimals);
  double r = std::round(v * scale) / scale;
  if (r == 0.0) r = 0.0;  // folds -0
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, r);
  return buf;
}

}  // namespace deepterra::csv
