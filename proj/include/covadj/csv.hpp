#pragma once

#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace covadj::csv {

using Row = std::vector<std::string>;

/// Parses RFC 4180 CSV: comma separator, optional double-quoted fields with
/// "" escapes, CRLF or LF record terminators. Blank trailing lines are skipped.
inline std::vector<Row> parse(std::istream& in) {
  std::vector<Row> rows;
  Row row;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool row_has_content = false;
  std::size_t line = 1;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_row = [&] {
    if (row_has_content || !row.empty()) {
      end_field();
      rows.push_back(std::move(row));
    }
    row.clear();
    field.clear();
    row_has_content = false;
    field_was_quoted = false;
  };

  char c;
  while (in.get(c)) {
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
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
        if (!field.empty() || field_was_quoted)
          fail(ErrorCode::ParseError, "stray quote on line " + std::to_string(line));
        in_quotes = true;
        field_was_quoted = true;
        row_has_content = true;
        break;
      case ',':
        end_field();
        row_has_content = true;
        break;
      case '\r':
        if (in.peek() == '\n') in.get(c);
        end_row();
        ++line;
        break;
      case '\n':
        end_row();
        ++line;
        break;
      default:
        if (field_was_quoted)
          fail(ErrorCode::ParseError, "text after closing quote on line " + std::to_string(line));
        field.push_back(c);
        row_has_content = true;
    }
  }
  if (in_quotes) fail(ErrorCode::ParseError, "unterminated quoted field");
  end_row();
  return rows;
}

inline std::vector<Row> parse(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

inline std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline void write_row(std::ostream& out, const Row& row) {
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (j) out << ',';
    out << quote(row[j]);
  }
  out << '\n';
}

}  // namespace covadj::csv
