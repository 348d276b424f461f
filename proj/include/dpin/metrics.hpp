#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dpin/ensemble.hpp"
#include "dpin/error.hpp"
#include "dpin/losses.hpp"

namespace dpin {

/// One evaluation. rmse and ll are in original target units; mpiw is in
/// standardized target units (original-unit width divided by the training
/// target std), mpiw_original in original units.
struct MetricsRecord {
  double rmse = 0.0;
  double ll = 0.0;
  double picp = 0.0;
  double mpiw = 0.0;
  double mpiw_original = 0.0;
  std::size_t n_test = 0;
  std::int64_t run_id = 0;
  std::uint64_t split_seed = 0;
};

inline double rmse(const Vector& mu, const Vector& y) {
  detail::require_dims(mu.size() == y.size(), "rmse: length mismatch");
  detail::require(mu.size() > 0, "rmse: empty batch");
  return std::sqrt((y - mu).squaredNorm() / static_cast<double>(y.size()));
}

/// Mean fused interval width.
inline double mpiw(const EnsemblePi& ens) {
  if (ens.size() == 0) return 0.0;
  return (ens.mu_u_tilde - ens.mu_l_tilde).mean();
}

/// `target_scale` converts widths to standardized units (training target std).
inline MetricsRecord evaluate(const EnsemblePi& ens, const Vector& y, double target_scale = 1.0) {
  detail::require_dims(ens.size() == y.size(), "evaluate: length mismatch");
  detail::require(target_scale > 0.0, "evaluate: target scale must be positive");
  MetricsRecord r;
  r.n_test = static_cast<std::size_t>(y.size());
  r.rmse = rmse(ens.mu_bar, y);
  r.picp = picp_hard(ens.mu_l_tilde, ens.mu_u_tilde, y);
  r.mpiw_original = mpiw(ens);
  r.mpiw = r.mpiw_original / target_scale;
  r.ll = gaussian_ll(ens, y).mean;
  return r;
}

struct Stat {
  double mean = 0.0;
  double se = 0.0;  // sample std / sqrt(count); 0 when count == 1
  std::size_t count = 0;
};

inline Stat mean_se(const std::vector<double>& v) {
  detail::require(!v.empty(), "mean_se: no values");
  Stat s;
  s.count = v.size();
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

struct AggregateStats {
  Stat rmse, ll, picp, mpiw, mpiw_original;
  std::size_t runs = 0;
  /// Single record: standard errors are reported as 0.
  bool single_run = false;
};

inline constexpr std::array<std::string_view, 5> kMetricNames{"rmse", "ll", "picp", "mpiw", "mpiw_original"};

inline AggregateStats aggregate(const std::vector<MetricsRecord>& records) {
  detail::require(!records.empty(), "aggregate: no records");
  auto column = [&](auto field) {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(r.*field);
    return mean_se(v);
  };
  AggregateStats a;
  a.rmse = column(&MetricsRecord::rmse);
  a.ll = column(&MetricsRecord::ll);
  a.picp = column(&MetricsRecord::picp);
  a.mpiw = column(&MetricsRecord::mpiw);
  a.mpiw_original = column(&MetricsRecord::mpiw_original);
  a.runs = records.size();
  a.single_run = records.size() == 1;
  return a;
}

inline const Stat& stat_of(const AggregateStats& a, std::string_view name) {
  if (name == "rmse") return a.rmse;
  if (name == "ll") return a.ll;
  if (name == "picp") return a.picp;
  if (name == "mpiw") return a.mpiw;
  if (name == "mpiw_original") return a.mpiw_original;
  throw ValidationError("unknown metric '" + std::string(name) + "'");
}

}  // namespace dpin
