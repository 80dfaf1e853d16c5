#pragma once

// Minimal RFC-4180 reader: quoted fields, doubled quotes, CRLF or LF line
// endings, optional UTF-8 byte order mark.

#include <string>
#include <string_view>
#include <vector>

#include "safeatt/error.hpp"

namespace safeatt::csv {

using Record = std::vector<std::string>;

inline std::vector<Record> parse(std::string_view text) {
  if (text.size() >= 3 && static_cast<unsigned char>(text[0]) == 0xEF &&
      static_cast<unsigned char>(text[1]) == 0xBB && static_cast<unsigned char>(text[2]) == 0xBF) {
    text.remove_prefix(3);
  }

  std::vector<Record> records;
  Record current;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool record_started = false;
  std::size_t line = 1;

  auto end_field = [&] {
    current.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(current));
    current.clear();
    record_started = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
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
        if (!field.empty() || field_was_quoted) {
          throw Error(ErrorCode::MalformedCsv,
                      "unexpected quote inside unquoted field at line " + std::to_string(line));
        }
        in_quotes = true;
        field_was_quoted = true;
        record_started = true;
        break;
      case ',':
        end_field();
        record_started = true;
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        [[fallthrough]];
      case '\n':
        end_record();
        ++line;
        break;
      default:
        if (field_was_quoted) {
          throw Error(ErrorCode::MalformedCsv,
                      "characters after closing quote at line " + std::to_string(line));
        }
        field.push_back(c);
        record_started = true;
    }
  }
  if (in_quotes) {
    throw Error(ErrorCode::MalformedCsv, "unterminated quoted field");
  }
  if (record_started || !field.empty()) end_record();
  return records;
}

}  // namespace safeatt::csv
