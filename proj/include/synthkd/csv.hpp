#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "synthkd/common.hpp"

namespace synthkd {

// Minimal RFC-4180 writer: CRLF row endings, quotes only where required.
class CsvWriter {
 public:
  // Opens for append; writes the header only when starting a fresh file.
  CsvWriter(const std::string& path, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& fields);

  static std::string field(const std::string& value);
  static std::string field(double value);  // empty for NaN
  static std::string field(long long value);

 private:
  std::ofstream out_;
  std::size_t columns_;
};

}  // namespace synthkd
