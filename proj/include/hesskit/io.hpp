#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hesskit/tensor.hpp"

namespace hesskit {

/// 17 significant digits: enough for exact double round-trips through text.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

/// Comma-separated values, one matrix row per line, no header unless column
/// labels are supplied.
inline void write_csv_matrix(std::ostream& out, const Tensor& m,
                             const std::vector<std::string>* col_labels = nullptr) {
  if (!m.is_matrix()) throw std::invalid_argument("write_csv_matrix: expected a matrix");
  if (col_labels) {
    for (std::size_t j = 0; j < col_labels->size(); ++j) {
      if (j) out << ',';
      out << (*col_labels)[j];
    }
    out << '\n';
  }
  for (std::int64_t i = 0; i < m.rows(); ++i) {
    for (std::int64_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_double(m.at(i, j));
    }
    out << '\n';
  }
}

inline void write_csv_matrix_file(const std::string& path, const Tensor& m,
                                  const std::vector<std::string>* col_labels = nullptr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open " + path + " for writing");
  write_csv_matrix(f, m, col_labels);
}

inline Tensor read_csv_matrix(std::istream& in, bool header = false) {
  std::vector<double> data;
  std::int64_t rows = 0, cols = -1;
  std::string line;
  if (header) std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::int64_t c = 0;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      const std::string cell = line.substr(pos, comma - pos);
      std::size_t used = 0;
      data.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument("csv: bad number '" + cell + "'");
      ++c;
      pos = comma + 1;
    }
    if (cols < 0) cols = c;
    else if (cols != c) throw std::invalid_argument("csv: ragged rows");
    ++rows;
  }
  return Tensor({rows, cols < 0 ? 0 : cols}, std::move(data));
}

inline Tensor read_csv_matrix_file(const std::string& path, bool header = false) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open " + path);
  return read_csv_matrix(f, header);
}

/// Log-magnitude scale for heatmaps: pixel 255 at the largest |entry|,
/// pixel 0 at `decades` orders of magnitude below it (or at exact zeros).
struct PgmScale {
  double log10_lo = 0.0;
  double log10_hi = 0.0;
};

/// |entries| as an 8-bit text PGM (P2) with log scaling. The scale lives in
/// the returned struct so a run manifest can record it.
inline PgmScale write_pgm_log_abs(std::ostream& out, const Tensor& m, double decades = 12.0) {
  if (!m.is_matrix()) throw std::invalid_argument("write_pgm_log_abs: expected a matrix");
  double amax = 0.0;
  for (double x : m.data) amax = std::max(amax, std::fabs(x));
  PgmScale scale;
  if (amax > 0.0) {
    scale.log10_hi = std::log10(amax);
    scale.log10_lo = scale.log10_hi - decades;
  }
  out << "P2\n" << m.cols() << " " << m.rows() << "\n255\n";
  for (std::int64_t i = 0; i < m.rows(); ++i) {
    for (std::int64_t j = 0; j < m.cols(); ++j) {
      int pixel = 0;
      const double a = std::fabs(m.at(i, j));
      if (a > 0.0 && amax > 0.0) {
        const double fr = (std::log10(a) - scale.log10_lo) / (scale.log10_hi - scale.log10_lo);
        pixel = static_cast<int>(std::lround(255.0 * std::clamp(fr, 0.0, 1.0)));
      }
      if (j) out << ' ';
      out << pixel;
    }
    out << '\n';
  }
  return scale;
}

inline PgmScale write_pgm_log_abs_file(const std::string& path, const Tensor& m,
                                       double decades = 12.0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open " + path + " for writing");
  return write_pgm_log_abs(f, m, decades);
}

}  // namespace hesskit
