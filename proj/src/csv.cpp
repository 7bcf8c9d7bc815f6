#include "mumt/csv.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace mumt {

int64_t CsvTable::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return int64_t(i);
  return -1;
}

static std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  size_t start = 0;
  for (;;) {
    size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  CsvTable table;
  table.path = path;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (lineno == 1) {
      table.header = std::move(cells);
    } else {
      if (cells.size() != table.header.size())
        throw FormatError(path + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(table.header.size()) + " columns, got " +
                          std::to_string(cells.size()));
      table.rows.push_back(std::move(cells));
    }
  }
  if (table.header.empty()) throw FormatError(path + ": empty file (missing header)");
  return table;
}

double parse_double(const CsvTable& table, size_t row, size_t col) {
  const std::string& cell = table.rows[row][col];
  if (cell == "nan" || cell == "NaN") return std::nan("");
  double v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw FormatError(table.path + ": row " + std::to_string(row + 2) + ", column '" +
                      table.header[col] + "': '" + cell + "' is not a number");
  return v;
}

int64_t parse_int(const CsvTable& table, size_t row, size_t col) {
  const std::string& cell = table.rows[row][col];
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw FormatError(table.path + ": row " + std::to_string(row + 2) + ", column '" +
                      table.header[col] + "': '" + cell + "' is not an integer");
  return v;
}

std::string format_float(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

CsvWriter::CsvWriter(const std::string& path) : path_(path) { buffer_.reserve(1 << 16); }

CsvWriter::~CsvWriter() {
  if (open_) {
    try {
      close();
    } catch (...) {
    }
  }
}

void CsvWriter::write_row(const std::vector<std::string>& cells) {
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) buffer_ += ',';
    buffer_ += cells[i];
  }
  buffer_ += '\n';
}

void CsvWriter::close() {
  open_ = false;
  std::ofstream out(path_, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path_);
  out.write(buffer_.data(), int64_t(buffer_.size()));
  if (!out) throw IoError("write failed for " + path_);
}

}  // namespace mumt
