#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::out_of_range("no column " + name);
  }
};

// Plain comma-separated values: no quoting, every row as wide as the header.
inline Table parse(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : l) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    f.push_back(cur);
    return f;
  };
  if (!std::getline(in, line)) throw std::runtime_error("csv: empty input");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line);
    if (f.size() != t.header.size()) throw std::runtime_error("csv: ragged row '" + line + "'");
    t.rows.push_back(std::move(f));
  }
  return t;
}

}  // namespace csv
