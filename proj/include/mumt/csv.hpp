#pragma once

#include <string>
#include <vector>

#include "mumt/common.hpp"

namespace mumt {

// Minimal CSV: comma-separated, no quoting (the dataset format never needs
// it), UTF-8, LF line endings. Floats are written with shortest round-trip
// formatting so regenerating a dataset is byte-identical.

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int64_t column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(const std::string& path);

double parse_double(const CsvTable& table, size_t row, size_t col);
int64_t parse_int(const CsvTable& table, size_t row, size_t col);

std::string format_float(double v);

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void write_row(const std::vector<std::string>& cells);
  void close();

 private:
  std::string path_;
  std::string buffer_;
  bool open_ = true;
};

}  // namespace mumt
