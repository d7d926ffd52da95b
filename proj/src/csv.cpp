#include "synthkd/csv.hpp"

#include <cstdio>
#include <filesystem>

namespace synthkd {

namespace {

std::string quote_if_needed(const std::string& s) {
  const bool needs = s.find_first_of(",\"\r\n") != std::string::npos;
  if (!needs) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

}  // namespace

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : columns_(header.size()) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app | std::ios::binary);
  if (!out_) throw DataError("cannot open CSV " + path);
  if (fresh) row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) {
    throw ContractError("CSV row has " + std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(columns_));
  }
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    out_ << quote_if_needed(fields[i]);
  }
  out_ << "\r\n";
  out_.flush();
}

std::string CsvWriter::field(const std::string& value) { return value; }

std::string CsvWriter::field(double value) {
  if (std::isnan(value)) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", value);
  return buf;
}

std::string CsvWriter::field(long long value) { return std::to_string(value); }

}  // namespace synthkd
