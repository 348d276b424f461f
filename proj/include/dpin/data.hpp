#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dpin/error.hpp"
#include "dpin/rng.hpp"

namespace dpin {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Per-column affine standardization. Identity until fitted.
struct Standardizer {
  Vector feature_mean;
  Vector feature_std;
  double target_mean = 0.0;
  double target_std = 1.0;
  std::vector<std::size_t> constant_columns;  // std clamped to 1

  bool fitted() const { return feature_mean.size() > 0; }

  static Standardizer fit(const Matrix& x, const Vector& y) {
    detail::require(x.rows() > 0, "cannot fit standardizer on an empty set");
    Standardizer s;
    const double n = static_cast<double>(x.rows());
    s.feature_mean = x.colwise().mean().transpose();
    s.feature_std.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double sd = std::sqrt((x.col(j).array() - s.feature_mean(j)).square().sum() / n);
      if (sd > 0.0 && std::isfinite(sd)) {
        s.feature_std(j) = sd;
      } else {
        s.feature_std(j) = 1.0;
        s.constant_columns.push_back(static_cast<std::size_t>(j));
      }
    }
    s.target_mean = y.mean();
    const double ysd = std::sqrt((y.array() - s.target_mean).square().sum() / n);
    s.target_std = ysd > 0.0 ? ysd : 1.0;
    return s;
  }

  Matrix transform_features(const Matrix& x) const {
    if (!fitted()) return x;
    detail::require_dims(x.cols() == feature_mean.size(), "standardizer: feature width mismatch");
    return ((x.rowwise() - feature_mean.transpose()).array().rowwise() / feature_std.transpose().array()).matrix();
  }
  Matrix inverse_features(const Matrix& z) const {
    if (!fitted()) return z;
    return ((z.array().rowwise() * feature_std.transpose().array()).matrix().rowwise() + feature_mean.transpose());
  }
  Vector transform_targets(const Vector& y) const {
    return ((y.array() - target_mean) / target_std).matrix();
  }
  Vector inverse_targets(const Vector& z) const { return (z.array() * target_std + target_mean).matrix(); }
  /// Widths and other differences only scale.
  Vector inverse_widths(const Vector& w) const { return w * target_std; }
};

struct Dataset {
  Matrix features;  // N x d, original units
  Vector targets;   // N, original units
  Standardizer standardizer;
  std::string name;
  std::vector<std::string> feature_names;
  std::string target_name = "y";

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }

  Matrix standardized_features() const { return standardizer.transform_features(features); }
  Vector standardized_targets() const { return standardizer.fitted() ? standardizer.transform_targets(targets) : targets; }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.targets.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(rows[i]);
      detail::require(r < features.rows(), "subset: row index out of range");
      out.features.row(static_cast<Eigen::Index>(i)) = features.row(r);
      out.targets(static_cast<Eigen::Index>(i)) = targets(r);
    }
    out.standardizer = standardizer;
    out.name = name;
    out.feature_names = feature_names;
    out.target_name = target_name;
    return out;
  }

  void validate() const {
    detail::require_dims(features.rows() == targets.size(), "dataset: feature/target row count mismatch");
    detail::require(features.allFinite() && targets.allFinite(), "dataset: non-finite entries");
  }
};

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// How x selects between the two generating regimes.
///  kMagnitude: |x| < 1 -> low-noise regime, |x| >= 1 -> high-noise regime.
///  kSign:      x < 0   -> low-noise regime, x >= 0  -> high-noise regime.
enum class RegimeRule { kMagnitude, kSign };

inline bool low_noise_regime(double x, RegimeRule rule) {
  return rule == RegimeRule::kMagnitude ? std::abs(x) < 1.0 : x < 0.0;
}

/// Noise-free part of each regime, for tests and plots.
inline double synthetic_low_noise_curve(double x, double phase) { return -2.0 + std::sin(10.0 * x + phase); }
inline double synthetic_high_noise_curve(double x, double phase) { return x * std::sin(12.0 * x + phase); }

/// n points with x ~ U[-2, 2].
///   low-noise regime:  y = -2 + sin(10x + w1) + w2, w1 ~ N(0, 0.0016), w2 ~ U(-0.3, 0.1)
///   high-noise regime: y = x sin(12x + w1) + w2,    w1 ~ U(-0.4, 0.3), w2 ~ N(0, 0.25)
/// Normal parameters are variances.
inline Dataset gen_synthetic(std::size_t n, std::uint64_t seed, RegimeRule rule = RegimeRule::kMagnitude) {
  detail::require(n >= 1, "gen_synthetic: n must be at least 1");
  Engine eng = make_engine(seed, Stream::kSynthetic);
  Dataset ds;
  ds.name = "synthetic";
  ds.feature_names = {"x"};
  ds.features.resize(static_cast<Eigen::Index>(n), 1);
  ds.targets.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double x = uniform(eng, -2.0, 2.0);
    double y;
    if (low_noise_regime(x, rule)) {
      const double w1 = 0.04 * standard_normal(eng);
      const double w2 = uniform(eng, -0.3, 0.1);
      y = synthetic_low_noise_curve(x, w1) + w2;
    } else {
      const double w1 = uniform(eng, -0.4, 0.3);
      const double w2 = 0.5 * standard_normal(eng);
      y = synthetic_high_noise_curve(x, w1) + w2;
    }
    ds.features(static_cast<Eigen::Index>(i), 0) = x;
    ds.targets(static_cast<Eigen::Index>(i)) = y;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvOptions {
  /// Column name (requires a header) or zero-based index. Default: last column.
  std::variant<std::monostate, std::string, std::size_t> target;
  bool has_header = true;
  /// Columns excluded from the features (names or indices as strings).
  std::vector<std::string> drop_columns;
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_number(const std::string& cell) {
  const std::string t = trim(cell);
  if (t.empty()) return std::nullopt;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (...) {
    return std::nullopt;
  }
  if (used != t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Comma-separated numeric table: '.' decimals, optional header, no quoting.
/// Features are all remaining columns in file order.
inline Dataset load_csv(const std::string& path, const CsvOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("load_csv: cannot open '" + path + "'");

  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_line(line);
    if (opts.has_header && header.empty()) {
      for (auto& c : cells) header.push_back(detail::trim(c));
      width = header.size();
      continue;
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw ValidationError("load_csv: row " + std::to_string(rows.size()) + " (line " + std::to_string(line_no) +
                            ") has " + std::to_string(cells.size()) + " cells, expected " + std::to_string(width));
    std::vector<double> row(width);
    for (std::size_t j = 0; j < width; ++j) {
      const auto v = detail::parse_number(cells[j]);
      if (!v)
        throw ValidationError("load_csv: non-numeric cell at row " + std::to_string(rows.size()) + ", column " +
                              (header.empty() ? std::to_string(j) : "'" + header[j] + "'") + " (line " +
                              std::to_string(line_no) + "): '" + detail::trim(cells[j]) + "'");
      row[j] = *v;
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValidationError("load_csv: '" + path + "' has no data rows");
  if (header.empty())
    for (std::size_t j = 0; j < width; ++j) header.push_back("c" + std::to_string(j));

  auto column_index = [&](const std::string& key) -> std::size_t {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == key) return j;
    if (const auto v = detail::parse_number(key); v && *v >= 0 && std::floor(*v) == *v && *v < double(width))
      return static_cast<std::size_t>(*v);
    throw ValidationError("load_csv: missing column '" + key + "'");
  };

  std::size_t target = width - 1;
  if (const auto* name = std::get_if<std::string>(&opts.target)) target = column_index(*name);
  if (const auto* idx = std::get_if<std::size_t>(&opts.target)) {
    if (*idx >= width) throw ValidationError("load_csv: missing target column " + std::to_string(*idx));
    target = *idx;
  }
  std::vector<bool> dropped(width, false);
  dropped[target] = true;
  for (const auto& d : opts.drop_columns) dropped[column_index(d)] = true;
  std::vector<std::size_t> feature_cols;
  for (std::size_t j = 0; j < width; ++j)
    if (!dropped[j]) feature_cols.push_back(j);
  detail::require(!feature_cols.empty(), "load_csv: no feature columns left");

  Dataset ds;
  ds.name = path;
  ds.target_name = header[target];
  for (auto j : feature_cols) ds.feature_names.push_back(header[j]);
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(feature_cols.size()));
  ds.targets.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < feature_cols.size(); ++k)
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][feature_cols[k]];
    ds.targets(static_cast<Eigen::Index>(i)) = rows[i][target];
  }
  return ds;
}

/// Writes features then target, with header, at round-trip precision.
inline void write_csv(std::ostream& out, const Dataset& ds) {
  out.precision(17);
  for (std::size_t j = 0; j < static_cast<std::size_t>(ds.dim()); ++j)
    out << (j < ds.feature_names.size() ? ds.feature_names[j] : "x" + std::to_string(j)) << ',';
  out << ds.target_name << '\n';
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.dim(); ++j) out << ds.features(i, j) << ',';
    out << ds.targets(i) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double train = 0.9;
  double pool = 0.0;
  double test = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(train >= 0 && pool >= 0 && test >= 0, "split fractions must be non-negative");
    detail::require(std::abs(train + pool + test - 1.0) < 1e-9, "split fractions must sum to 1");
  }
};

struct Split {
  std::vector<std::size_t> train_idx, pool_idx, test_idx;  // rows of the source dataset
  Dataset train;
  std::optional<Dataset> pool;
  Dataset test;
};

/// Sizes: train = round(N*train), pool = round(N*pool), test = remainder.
inline std::vector<std::size_t> split_sizes(std::size_t n, const SplitSpec& spec) {
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.train));
  const auto n_pool = std::min(n - std::min(n, n_train),
                               static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.pool)));
  return {std::min(n, n_train), n_pool, n - std::min(n, n_train) - n_pool};
}

/// Seeded permutation then contiguous slicing. The standardizer is fitted on
/// the training rows and attached to every part.
inline Split split(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  ds.validate();
  const auto n = static_cast<std::size_t>(ds.size());
  const auto sizes = split_sizes(n, spec);
  detail::require(sizes[0] > 0, "split: empty training set");
  detail::require(spec.test == 0.0 || sizes[2] > 0, "split: empty test set");
  detail::require(spec.pool == 0.0 || sizes[1] > 0, "split: empty pool");

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Engine eng = make_engine(spec.seed, Stream::kSplit);
  shuffle(perm, eng);

  Split out;
  out.train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sizes[0]));
  out.pool_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(sizes[0]),
                      perm.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]));
  out.test_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]), perm.end());

  out.train = ds.subset(out.train_idx);
  out.train.standardizer = Standardizer::fit(out.train.features, out.train.targets);
  out.test = ds.subset(out.test_idx);
  out.test.standardizer = out.train.standardizer;
  if (spec.pool > 0.0) {
    out.pool = ds.subset(out.pool_idx);
    out.pool->standardizer = out.train.standardizer;
  }
  return out;
}

}  // namespace dpin
