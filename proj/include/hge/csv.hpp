#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hge::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

inline Table read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("csv: cannot open " + path);
  Table t;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("csv: empty file " + path);
  t.header = split_line(line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size())
      throw std::runtime_error("csv: row with " + std::to_string(cells.size()) +
                               " cells, header has " +
                               std::to_string(t.header.size()) + " in " + path);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

// Round-trip double formatting so reruns are byte-identical.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::runtime_error("csv: bad number '" + s + "'");
  return v;
}

inline int parse_bit(const std::string& s) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw std::runtime_error("csv: expected 0/1, got '" + s + "'");
}

class Writer {
public:
  explicit Writer(const std::string& path) : f_(path) {
    if (!f_) throw std::runtime_error("csv: cannot write " + path);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) f_ << ',';
      f_ << cells[i];
    }
    f_ << '\n';
  }

private:
  std::ofstream f_;
};

}  // namespace hge::csv
