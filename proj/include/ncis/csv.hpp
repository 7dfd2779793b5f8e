#ifndef NCIS_CSV_HPP
#define NCIS_CSV_HPP

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ncis/io.hpp"

namespace ncis {

/// Fixed-point text with 6 decimals, the precision used by every CSV.
inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Header row plus data rows; cells are written verbatim.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row(std::vector<std::string> cells) {
    if (cells.size() != header_.size())
      throw InvalidArgument("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(header_.size()));
    rows_.push_back(std::move(cells));
    return *this;
  }

  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  void save(const std::filesystem::path& path) const {
    const std::string s = str();
    write_file(path, Bytes(s.begin(), s.end()));
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace ncis

#endif  // NCIS_CSV_HPP
