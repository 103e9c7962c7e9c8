#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "nids_xray/common.hpp"

namespace nids_xray {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void append_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) throw InvalidArgument(str_cat("row width ", values.size(), " != ", cols_));
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }

  Matrix select_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols_), cols_,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
    }
    return out;
  }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Named feature columns plus a per-row ground-truth label (-1 unknown).
struct FeatureMatrix {
  std::vector<std::string> names;
  Matrix values;
  std::vector<int> labels;

  std::size_t rows() const { return values.rows(); }
  std::size_t cols() const { return values.cols(); }

  FeatureMatrix select_rows(std::span<const std::size_t> idx) const {
    FeatureMatrix out;
    out.names = names;
    out.values = values.select_rows(idx);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(labels.empty() ? -1 : labels[i]);
    return out;
  }

  FeatureMatrix slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(end, rows()); ++i) idx.push_back(i);
    return select_rows(idx);
  }

  std::size_t column_index(std::string_view name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw InvalidArgument(str_cat("no feature column named '", name, "'"));
    return static_cast<std::size_t>(it - names.begin());
  }
};

// Feature csv: the feature headers followed by a `label` column.
inline void write_feature_csv(const FeatureMatrix& fm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(str_cat("cannot write feature matrix '", path.string(), "'"));
  for (const auto& n : fm.names) out << n << ',';
  out << "label\n";
  for (std::size_t r = 0; r < fm.rows(); ++r) {
    for (double v : fm.values.row(r)) out << format_double(v) << ',';
    out << (fm.labels.empty() ? -1 : fm.labels[r]) << '\n';
  }
  if (!out) throw IoError(str_cat("failed writing feature matrix '", path.string(), "'"));
}

inline FeatureMatrix read_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(str_cat("cannot open feature matrix '", path.string(), "'"));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(str_cat("empty feature matrix '", path.string(), "'"));
  FeatureMatrix fm;
  fm.names = split(trim(line), ',');
  if (fm.names.empty() || fm.names.back() != "label") {
    throw FormatError(str_cat("feature matrix '", path.string(), "' has no trailing label column"));
  }
  fm.names.pop_back();
  const std::size_t cols = fm.names.size();
  fm.values = Matrix(0, cols);
  std::vector<double> row(cols);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != cols + 1) {
      throw FormatError(str_cat(path.string(), ":", line_no, ": expected ", cols + 1, " fields, got ", f.size()));
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] = parse_double(f[c], fm.names[c]);
    fm.values.append_row(row);
    fm.labels.push_back(static_cast<int>(parse_int(f[cols], "label")));
  }
  return fm;
}

// Binary form: little-endian float64 row-major values (labels appended as a
// final column) plus a text sidecar `<path>.hdr` listing rows, cols and
// column names.
inline void write_feature_binary(const FeatureMatrix& fm, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "binary matrix format assumes a little-endian host");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(str_cat("cannot write '", path.string(), "'"));
  for (std::size_t r = 0; r < fm.rows(); ++r) {
    out.write(reinterpret_cast<const char*>(fm.values.row(r).data()),
              static_cast<std::streamsize>(fm.cols() * sizeof(double)));
    const double label = fm.labels.empty() ? -1.0 : fm.labels[r];
    out.write(reinterpret_cast<const char*>(&label), sizeof label);
  }
  std::ofstream hdr(path.string() + ".hdr", std::ios::trunc);
  hdr << "rows " << fm.rows() << "\ncols " << fm.cols() + 1 << "\n";
  for (const auto& n : fm.names) hdr << n << '\n';
  hdr << "label\n";
  if (!out || !hdr) throw IoError(str_cat("failed writing '", path.string(), "'"));
}

inline FeatureMatrix read_feature_binary(const std::filesystem::path& path) {
  std::ifstream hdr(path.string() + ".hdr");
  if (!hdr) throw IoError(str_cat("cannot open header sidecar for '", path.string(), "'"));
  std::string key;
  std::size_t rows = 0, cols = 0;
  hdr >> key >> rows >> key >> cols;
  FeatureMatrix fm;
  std::string name;
  std::getline(hdr, name);
  while (std::getline(hdr, name)) {
    if (!trim(name).empty()) fm.names.push_back(trim(name));
  }
  if (cols == 0 || fm.names.size() != cols || fm.names.back() != "label") {
    throw FormatError(str_cat("malformed header sidecar for '", path.string(), "'"));
  }
  fm.names.pop_back();
  std::ifstream in(path, std::ios::binary);
  std::vector<double> row(cols);
  fm.values = Matrix(0, cols - 1);
  for (std::size_t r = 0; r < rows; ++r) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(cols * sizeof(double)));
    if (!in) throw IoError(str_cat("truncated binary matrix '", path.string(), "' at byte offset ", r * cols * 8));
    fm.values.append_row(std::span<const double>(row.data(), cols - 1));
    fm.labels.push_back(static_cast<int>(row.back()));
  }
  return fm;
}

}  // namespace nids_xray
