#pragma once

// Training objectives. All batch losses are means over the batch, and every
// gradient is with respect to the per-sample network quantities it names.

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "dpin/error.hpp"

namespace dpin {

using Vector = Eigen::VectorXd;

/// Weights of the interval objective: eta1 * interval-fit + eta2 * coverage.
struct DpiWeights {
  double eta1 = 1.0;
  double eta2 = 10.0;
  double alpha = 0.95;
  double softening = 160.0;

  void validate() const {
    detail::require(eta1 >= 0.0 && eta2 >= 0.0, "eta1 and eta2 must be non-negative");
    detail::require(eta1 + eta2 > 0.0, "eta1 + eta2 must be positive (degenerate objective)");
    detail::require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
    detail::require(softening > 0.0, "softening must be positive");
  }
};

struct MseResult {
  double value = 0.0;
  Vector grad_mu;
};

struct NllResult {
  double value = 0.0;
  Vector grad_mu;
  Vector grad_var;     // d loss / d sigma^2
  Vector grad_logvar;  // d loss / d log sigma^2
};

/// Gradients with respect to the interval widths lambda_u, lambda_l.
struct WidthLossResult {
  double value = 0.0;
  Vector grad_lambda_u;
  Vector grad_lambda_l;
};

/// Gradients with respect to the interval bounds.
struct BoundLossResult {
  double value = 0.0;
  Vector grad_lower;
  Vector grad_upper;
};

namespace detail {

inline void require_batch(Eigen::Index n, const char* op) {
  if (n < 1) throw ValidationError(std::string(op) + ": empty batch");
}

inline void require_same(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": length mismatch (" + std::to_string(a) + " vs " +
                                   std::to_string(b) + ")");
}

inline double logistic(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace detail

inline MseResult mse_loss(const Vector& mu, const Vector& y) {
  detail::require_same(mu.size(), y.size(), "mse_loss");
  detail::require_batch(mu.size(), "mse_loss");
  const double n = static_cast<double>(mu.size());
  const Vector r = mu - y;
  return {r.squaredNorm() / n, (2.0 / n) * r};
}

/// Gaussian negative log-likelihood with sigma^2 = exp(logvar); the constant
/// 0.5*log(2*pi) is dropped.
inline NllResult nll_loss(const Vector& mu, const Vector& logvar, const Vector& y) {
  detail::require_same(mu.size(), y.size(), "nll_loss");
  detail::require_same(logvar.size(), y.size(), "nll_loss");
  detail::require_batch(mu.size(), "nll_loss");
  if (!logvar.allFinite()) throw ValidationError("nll_loss: non-finite log-variance");
  const double n = static_cast<double>(mu.size());
  NllResult out;
  out.grad_mu.resize(mu.size());
  out.grad_var.resize(mu.size());
  out.grad_logvar.resize(mu.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double var = std::exp(logvar(i));
    const double r = mu(i) - y(i);
    total += 0.5 * logvar(i) + r * r / (2.0 * var);
    out.grad_mu(i) = r / var / n;
    out.grad_var(i) = (var - r * r) / (2.0 * var * var) / n;
    out.grad_logvar(i) = out.grad_var(i) * var;
  }
  out.value = total / n;
  return out;
}

/// Per-sample closed forms of the NLL gradients as commonly written:
/// d/dmu = (mu - y) / sigma^2 and ((mu - y)^2 - sigma^2) / sigma^4 for the
/// variance. The true per-sample derivative of the loss with respect to
/// sigma^2 is -1/2 times the second expression.
inline double nll_grad_mu_closed_form(double mu, double var, double y) { return (mu - y) / var; }
inline double nll_grad_var_closed_form(double mu, double var, double y) {
  return ((mu - y) * (mu - y) - var) / (var * var);
}

/// Interval-fit loss. Samples with y > mu train the upper width against the
/// residual y - mu; samples with y <= mu train the lower width against mu - y.
inline WidthLossResult pi_loss(const Vector& mu, const Vector& lambda_u, const Vector& lambda_l, const Vector& y) {
  detail::require_same(mu.size(), y.size(), "pi_loss");
  detail::require_same(lambda_u.size(), y.size(), "pi_loss");
  detail::require_same(lambda_l.size(), y.size(), "pi_loss");
  detail::require_batch(y.size(), "pi_loss");
  const double n = static_cast<double>(y.size());
  WidthLossResult out;
  out.grad_lambda_u = Vector::Zero(y.size());
  out.grad_lambda_l = Vector::Zero(y.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) > mu(i)) {
      const double d = lambda_u(i) - (y(i) - mu(i));
      total += d * d;
      out.grad_lambda_u(i) = 2.0 * d / n;
    } else {
      const double d = lambda_l(i) - (mu(i) - y(i));
      total += d * d;
      out.grad_lambda_l(i) = 2.0 * d / n;
    }
  }
  out.value = total / n;
  return out;
}

/// Fraction of targets inside [lower, upper], both ends inclusive.
inline double picp_hard(const Vector& lower, const Vector& upper, const Vector& y) {
  detail::require_same(lower.size(), y.size(), "picp_hard");
  detail::require_same(upper.size(), y.size(), "picp_hard");
  detail::require_batch(y.size(), "picp_hard");
  Eigen::Index inside = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (lower(i) > upper(i))
      throw ValidationError("picp_hard: crossed bounds at index " + std::to_string(i));
    if (y(i) <= upper(i) && y(i) >= lower(i)) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(y.size());
}

/// Logistic relaxation of the coverage indicator pair with steepness s.
inline BoundLossResult picp_soft(const Vector& lower, const Vector& upper, const Vector& y, double s) {
  detail::require_same(lower.size(), y.size(), "picp_soft");
  detail::require_same(upper.size(), y.size(), "picp_soft");
  detail::require_batch(y.size(), "picp_soft");
  detail::require(s > 0.0, "picp_soft: softening must be positive");
  const double n = static_cast<double>(y.size());
  BoundLossResult out;
  out.grad_lower.resize(y.size());
  out.grad_upper.resize(y.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double a = detail::logistic(s * (y(i) - lower(i)));
    const double b = detail::logistic(s * (upper(i) - y(i)));
    total += a * b;
    out.grad_lower(i) = -s * a * (1.0 - a) * b / n;
    out.grad_upper(i) = s * b * (1.0 - b) * a / n;
  }
  out.value = total / n;
  return out;
}

/// Squared shortfall of soft coverage from the target alpha.
inline BoundLossResult picp_loss(const Vector& lower, const Vector& upper, const Vector& y, const DpiWeights& w) {
  const BoundLossResult soft = picp_soft(lower, upper, y, w.softening);
  const double gap = w.alpha - soft.value;
  BoundLossResult out;
  out.value = gap * gap;
  out.grad_lower = -2.0 * gap * soft.grad_lower;
  out.grad_upper = -2.0 * gap * soft.grad_upper;
  return out;
}

struct DpiLossResult {
  double value = 0.0;
  double pi_value = 0.0;
  double picp_value = 0.0;
  Vector grad_lambda_u;
  Vector grad_lambda_l;
};

/// Weighted interval objective over widths around a fixed mean. The mean gets
/// no gradient.
inline DpiLossResult dpi_loss(const Vector& mu, const Vector& lambda_u, const Vector& lambda_l, const Vector& y,
                              const DpiWeights& w) {
  w.validate();
  const WidthLossResult fit = pi_loss(mu, lambda_u, lambda_l, y);
  const Vector upper = mu + lambda_u;
  const Vector lower = mu - lambda_l;
  const BoundLossResult cov = picp_loss(lower, upper, y, w);
  DpiLossResult out;
  out.pi_value = fit.value;
  out.picp_value = cov.value;
  out.value = w.eta1 * fit.value + w.eta2 * cov.value;
  // upper = mu + lambda_u, lower = mu - lambda_l
  out.grad_lambda_u = w.eta1 * fit.grad_lambda_u + w.eta2 * cov.grad_upper;
  out.grad_lambda_l = w.eta1 * fit.grad_lambda_l - w.eta2 * cov.grad_lower;
  return out;
}

}  // namespace dpin
