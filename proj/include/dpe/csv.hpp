#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpe/common.hpp"

namespace dpe {

// Minimal CSV writer; numbers are emitted with round-trip precision so a
// rerun with the same seed produces byte-identical files.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);

  void row(const std::vector<std::string>& cells);
  static std::string cell(double v) { return format_double(v); }
  static std::string cell(long v) { return std::to_string(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(const std::string& s) { return s; }

 private:
  std::ofstream out_;
  std::size_t columns_;
};

}  // namespace dpe
