#pragma once

// Minimal RFC-4180 reader/writer.

#include <string>
#include <string_view>
#include <vector>

namespace deepterra::csv {

using Row = std::vector<std::string>;

std::string escape(std::string_view field);
std::string format_row(const Row& row);  // terminated by CRLF

// Accepts CRLF or LF line endings; throws Domain on an unterminated quote.
std::vector<Row> parse(std::string_view text);

std::string fixed(double v, int decimals);  // never prints "-0.00"

}  // namespace deepterra::csv
