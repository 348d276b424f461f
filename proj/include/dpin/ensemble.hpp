#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <future>
#include <string>
#include <vector>

#include "dpin/data.hpp"
#include "dpin/error.hpp"
#include "dpin/model.hpp"

namespace dpin {

/// Ensemble interval: mean of member means, mean and across-member standard
/// deviation of each bound, and bounds widened by 1.96 deviations.
struct EnsemblePi {
  Vector mu_bar;
  Vector mu_u_bar, mu_l_bar;
  Vector sigma_u, sigma_l;
  Vector mu_u_tilde, mu_l_tilde;
  std::size_t members = 0;
  /// Set when members == 1 and the deviation terms were taken as zero.
  bool single_member = false;

  Eigen::Index size() const { return mu_bar.size(); }
  Vector width() const { return mu_u_tilde - mu_l_tilde; }
};

inline constexpr double kFusionQuantile = 1.96;

inline EnsemblePi fuse(const std::vector<PiPrediction>& preds) {
  detail::require(!preds.empty(), "fuse: no member predictions");
  const Eigen::Index n = preds.front().size();
  for (std::size_t j = 0; j < preds.size(); ++j) {
    const auto& p = preds[j];
    if (p.mu.size() != n || p.lambda_u.size() != n || p.lambda_l.size() != n)
      throw DimensionError("fuse: member " + std::to_string(j) + " has mismatched length");
  }
  const double m = static_cast<double>(preds.size());
  EnsemblePi e;
  e.members = preds.size();
  e.single_member = preds.size() == 1;
  e.mu_bar = Vector::Zero(n);
  e.mu_u_bar = Vector::Zero(n);
  e.mu_l_bar = Vector::Zero(n);
  for (const auto& p : preds) {
    e.mu_bar += p.mu;
    e.mu_u_bar += p.upper();
    e.mu_l_bar += p.lower();
  }
  e.mu_bar /= m;
  e.mu_u_bar /= m;
  e.mu_l_bar /= m;

  e.sigma_u = Vector::Zero(n);
  e.sigma_l = Vector::Zero(n);
  if (preds.size() > 1) {
    for (const auto& p : preds) {
      e.sigma_u += (p.upper() - e.mu_u_bar).cwiseAbs2();
      e.sigma_l += (p.lower() - e.mu_l_bar).cwiseAbs2();
    }
    e.sigma_u = (e.sigma_u / (m - 1.0)).cwiseSqrt();
    e.sigma_l = (e.sigma_l / (m - 1.0)).cwiseSqrt();
  }
  e.mu_u_tilde = e.mu_u_bar + kFusionQuantile * e.sigma_u;
  e.mu_l_tilde = e.mu_l_bar - kFusionQuantile * e.sigma_l;
  return e;
}

struct GaussianLl {
  double mean = 0.0;
  Vector per_sample;
};

/// Log-likelihood of y under N(mu_bar, sigma^2) with sigma = fused width / 3.92.
inline GaussianLl gaussian_ll(const EnsemblePi& ens, const Vector& y) {
  detail::require_dims(y.size() == ens.size(), "gaussian_ll: length mismatch");
  detail::require(y.size() > 0, "gaussian_ll: empty batch");
  constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;
  GaussianLl out;
  out.per_sample.resize(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double width = ens.mu_u_tilde(i) - ens.mu_l_tilde(i);
    if (!(width > 0.0)) throw ValidationError("gaussian_ll: non-positive interval width at index " + std::to_string(i));
    const double sigma = width / (2.0 * kFusionQuantile);
    const double r = y(i) - ens.mu_bar(i);
    out.per_sample(i) = -std::log(sigma) - kHalfLog2Pi - r * r / (2.0 * sigma * sigma);
  }
  out.mean = out.per_sample.mean();
  return out;
}

struct MemberReport {
  std::uint64_t seed = 0;
  TrainHistory stage1;
  TrainHistory stage2;
  bool diverged() const { return stage1.diverged || stage2.diverged; }
};

struct Ensemble {
  std::vector<DpinModel> members;       // non-diverged members only
  std::vector<MemberReport> reports;    // one per attempted member

  std::vector<PiPrediction> member_predictions(const Matrix& inputs) const {
    std::vector<PiPrediction> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(dpin::predict(m, inputs));
    return out;
  }
  EnsemblePi predict(const Matrix& inputs) const { return fuse(member_predictions(inputs)); }
};

/// Trains one DPIN through both stages.
inline MemberReport train_member(DpinModel& model, const Dataset& data) {
  MemberReport rep;
  rep.seed = model.config.seed;
  rep.stage1 = train_stage1(model, data);
  if (!rep.stage1.diverged) rep.stage2 = train_stage2(model, data);
  return rep;
}

/// M members, member i seeded with cfg.seed + i; otherwise identical. Members
/// train concurrently when `parallel` is set. Throws DivergenceError if more
/// than half diverge; otherwise diverged members are dropped and reported.
inline Ensemble train_ensemble(const Dataset& data, const DpinConfig& cfg, std::size_t m, bool parallel = true) {
  detail::require(m >= 1, "train_ensemble: member count must be at least 1");
  cfg.validate();
  std::vector<DpinModel> models;
  for (std::size_t i = 0; i < m; ++i) {
    DpinConfig c = cfg;
    c.seed = cfg.seed + i;
    models.push_back(DpinModel::create(c));
  }
  std::vector<MemberReport> reports(m);
  if (parallel && m > 1) {
    std::vector<std::future<MemberReport>> jobs;
    for (std::size_t i = 0; i < m; ++i)
      jobs.push_back(std::async(std::launch::async, [&models, &data, i] { return train_member(models[i], data); }));
    for (std::size_t i = 0; i < m; ++i) reports[i] = jobs[i].get();
  } else {
    for (std::size_t i = 0; i < m; ++i) reports[i] = train_member(models[i], data);
  }

  Ensemble ens;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (reports[i].diverged())
      ++failed;
    else
      ens.members.push_back(std::move(models[i]));
  }
  ens.reports = std::move(reports);
  if (failed * 2 > m)
    throw DivergenceError("train_ensemble: " + std::to_string(failed) + " of " + std::to_string(m) +
                          " members diverged");
  return ens;
}

}  // namespace dpin
