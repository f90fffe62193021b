#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace csks::csv {

// Minimal CSV table: a header row plus string cells. Lines starting with '#'
// are provenance comments and are kept separately. No quoting support; fields
// written by this project never contain commas.
struct Table {
  std::vector<std::string> comments;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of `column` in the header; throws DataError when absent.
  std::size_t column(const std::string& name) const;
};

Table read(const std::filesystem::path& path);
void write(const std::filesystem::path& path, const Table& table);

std::vector<std::string> split(const std::string& line, char sep = ',');
double to_double(const std::string& cell);
int to_int(const std::string& cell);

}  // namespace csks::csv
