#pragma once

// Gradient verification for every training objective composed with a small
// random network: reverse-mode parameter gradients against central finite
// differences of the scalar loss. The NLL is additionally checked against its
// per-sample closed forms and a forward-mode dual-number evaluation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpin/losses.hpp"
#include "dpin/model.hpp"
#include "dpin/nnet.hpp"
#include "dpin/rng.hpp"

namespace dpin {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-4;
  /// Central stencil: 3 points (f(x+h)-f(x-h))/2h or 5 points
  /// (f(x-2h)-8f(x-h)+8f(x+h)-f(x+2h))/12h. The five-point form keeps the
  /// truncation error small for the steep logistic in the coverage loss.
  int stencil = 5;
  double rel_tol = 1e-4;
  double abs_tol = 1e-6;
  double pass_fraction = 0.99;
  double closed_form_tol = 1e-10;
  Eigen::Index batch = 16;
  /// Multiplies analytic gradients before comparison; anything other than 1
  /// is a negative control and must fail.
  double corrupt_scale = 1.0;
};

struct GradcheckRow {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;   // over entries larger than abs_tol
  double max_abs_error = 0.0;
  double fraction_within = 1.0; // share of entries above abs_tol that agree to rel_tol
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.passed; });
  }
};

/// Scalar loss over network outputs; writes d loss / d outputs into `grad`.
using OutputLoss = std::function<double(const Matrix& outputs, Matrix* grad)>;

namespace detail {

/// Random ReLU chain whose hidden pre-activations on `x` all sit at least
/// `margin` from the kink, so finite differences never straddle it.
inline NetworkParams random_chain(const Matrix& x, const std::vector<Eigen::Index>& hidden, Eigen::Index out_dim,
                                  std::uint64_t seed, double margin = 1e-2) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    NetworkParams net;
    net.input_dim = x.cols();
    int src = kNetworkInput;
    for (auto h : hidden) src = static_cast<int>(add_layer(net, src, h, Activation::kRelu, "g"));
    net.outputs = {add_layer(net, src, out_dim, Activation::kLinear, "g")};
    initialize(net, attempt == 0 ? seed : mix64(seed + attempt));
    const ForwardTrace t = forward(net, x);
    bool clear = true;
    for (std::size_t k = 0; k + 1 < net.layers.size(); ++k)
      clear = clear && t.pre_activations[k].cwiseAbs().minCoeff() >= margin;
    if (clear || attempt >= 1000) return net;
  }
}

inline double& param_ref(NetworkParams& net, std::size_t layer, Eigen::Index flat, bool bias) {
  auto& l = net.layers[layer];
  return bias ? l.bias(flat) : l.weight(flat / l.weight.cols(), flat % l.weight.cols());
}

/// kTiny: both values at or below abs_tol, where relative error is noise.
enum class Agreement { kRelative, kAbsolute, kTiny, kNone };

inline Agreement compare(GradcheckRow& row, double analytic, double numeric, const GradcheckOptions& o) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  row.max_abs_error = std::max(row.max_abs_error, diff);
  ++row.entries;
  if (scale <= o.abs_tol) return diff <= o.abs_tol ? Agreement::kTiny : Agreement::kNone;
  row.max_rel_error = std::max(row.max_rel_error, diff / scale);
  if (diff <= o.rel_tol * scale) return Agreement::kRelative;
  return diff <= o.abs_tol ? Agreement::kAbsolute : Agreement::kNone;
}

/// Pass rule: at least pass_fraction of the entries above abs_tol agree to
/// rel_tol, and every other entry agrees to abs_tol.
struct Tally {
  std::size_t relative = 0;
  std::size_t sized = 0;
  bool any_none = false;

  void add(Agreement a) {
    if (a == Agreement::kRelative) ++relative;
    if (a == Agreement::kRelative || a == Agreement::kAbsolute) ++sized;
    if (a == Agreement::kNone) any_none = true;
  }
  void finish(GradcheckRow& row, const GradcheckOptions& o) const {
    row.fraction_within = sized ? static_cast<double>(relative) / static_cast<double>(sized) : 1.0;
    row.passed = !any_none && row.fraction_within >= o.pass_fraction;
  }
};

/// Central-difference derivative of `f` at the current value of `p`.
template <typename F>
double central_difference(double& p, double h, int stencil, F&& f) {
  const double saved = p;
  auto at = [&](double offset) {
    p = saved + offset;
    const double v = f();
    p = saved;
    return v;
  };
  if (stencil == 3) return (at(h) - at(-h)) / (2.0 * h);
  return (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
}

}  // namespace detail

/// Parameter-gradient check of `loss` composed with `net` on `inputs`.
/// Passes when at least `pass_fraction` of entries agree to `rel_tol` and
/// every remaining entry agrees to `abs_tol`.
inline GradcheckRow check_network_gradient(const std::string& name, NetworkParams net, const Matrix& inputs,
                                           const OutputLoss& loss, const GradcheckOptions& o) {
  GradcheckRow row;
  row.name = name;
  const ForwardTrace t = forward(net, inputs);
  Matrix og = Matrix::Zero(t.outputs.rows(), t.outputs.cols());
  loss(t.outputs, &og);
  const Gradients g = backward(net, t, og);

  auto eval = [&](const NetworkParams& p) { return loss(forward(p, inputs).outputs, nullptr); };
  detail::Tally tally;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    for (int part = 0; part < 2; ++part) {
      const bool bias = part == 1;
      const Eigen::Index count = bias ? net.layers[k].bias.size() : net.layers[k].weight.size();
      for (Eigen::Index f = 0; f < count; ++f) {
        double& p = detail::param_ref(net, k, f, bias);
        const double numeric = detail::central_difference(p, o.step, o.stencil, [&] { return eval(net); });
        const double analytic =
            o.corrupt_scale * (bias ? g.bias[k](f) : g.weight[k](f / net.layers[k].weight.cols(),
                                                                 f % net.layers[k].weight.cols()));
        tally.add(detail::compare(row, analytic, numeric, o));
      }
    }
  }
  tally.finish(row, o);
  return row;
}

// ---------------------------------------------------------------------------
// Forward-mode dual numbers, used as an independent derivative route for the
// NLL.

struct Dual {
  double v = 0.0;
  double d = 0.0;
};
inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual log(Dual a) { return {std::log(a.v), a.d / a.v}; }
inline Dual constant(double c) { return {c, 0.0}; }

/// One sample's NLL term in (mu, sigma^2) parametrization.
inline Dual nll_term(Dual mu, Dual var, Dual y) {
  const Dual r = y - mu;
  return constant(0.5) * log(var) + r * r / (constant(2.0) * var);
}

/// Checks the batch NLL gradients three ways: closed forms, dual numbers and
/// finite differences (of the loss in the var parametrization).
inline std::vector<GradcheckRow> check_nll_closed_forms(const GradcheckOptions& o) {
  Engine eng = make_engine(o.seed, Stream::kGradcheck, 100);
  const Eigen::Index n = o.batch;
  Vector mu(n), logvar(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    mu(i) = uniform(eng, -1.0, 1.0);
    logvar(i) = uniform(eng, -1.0, 1.0);
    y(i) = uniform(eng, -2.0, 2.0);
  }
  const NllResult r = nll_loss(mu, logvar, y);
  const double inv_n = 1.0 / static_cast<double>(n);

  GradcheckRow closed{"nll_closed_form", 0, 0.0, 0.0, 1.0, false};
  GradcheckRow dual{"nll_dual_number", 0, 0.0, 0.0, 1.0, false};
  std::size_t within_closed = 0, within_dual = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double var = std::exp(logvar(i));
    // d/dmu matches the closed form directly; d/dsigma^2 equals -1/2 times
    // ((mu - y)^2 - sigma^2) / sigma^4.
    const double cf_mu = inv_n * nll_grad_mu_closed_form(mu(i), var, y(i));
    const double cf_var = -0.5 * inv_n * nll_grad_var_closed_form(mu(i), var, y(i));
    for (auto [a, b] : {std::pair{o.corrupt_scale * r.grad_mu(i), cf_mu}, std::pair{o.corrupt_scale * r.grad_var(i), cf_var}}) {
      const double diff = std::abs(a - b);
      closed.max_abs_error = std::max(closed.max_abs_error, diff);
      closed.max_rel_error = std::max(closed.max_rel_error, diff / std::max({std::abs(a), std::abs(b), 1e-300}));
      if (diff <= o.closed_form_tol * std::max(1.0, std::abs(b))) ++within_closed;
      ++closed.entries;
    }
    const Dual d_mu = nll_term({mu(i), 1.0}, constant(var), constant(y(i)));
    const Dual d_var = nll_term(constant(mu(i)), {var, 1.0}, constant(y(i)));
    for (auto [a, b] : {std::pair{o.corrupt_scale * r.grad_mu(i), inv_n * d_mu.d},
                        std::pair{o.corrupt_scale * r.grad_var(i), inv_n * d_var.d}}) {
      const double diff = std::abs(a - b);
      dual.max_abs_error = std::max(dual.max_abs_error, diff);
      dual.max_rel_error = std::max(dual.max_rel_error, diff / std::max({std::abs(a), std::abs(b), 1e-300}));
      if (diff <= o.closed_form_tol * std::max(1.0, std::abs(b))) ++within_dual;
      ++dual.entries;
    }
  }
  closed.fraction_within = static_cast<double>(within_closed) / static_cast<double>(closed.entries);
  dual.fraction_within = static_cast<double>(within_dual) / static_cast<double>(dual.entries);
  closed.passed = within_closed == closed.entries;
  dual.passed = within_dual == dual.entries;

  // Finite differences of the batch loss with respect to each sigma^2.
  GradcheckRow fd{"nll_var_finite_difference", 0, 0.0, 0.0, 1.0, false};
  detail::Tally tally;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double var = std::exp(logvar(i));
    double v = var;
    const double numeric = detail::central_difference(v, o.step, o.stencil, [&] {
      Vector lv = logvar;
      lv(i) = std::log(v);
      return nll_loss(mu, lv, y).value;
    });
    tally.add(detail::compare(fd, o.corrupt_scale * r.grad_var(i), numeric, o));
  }
  tally.finish(fd, o);
  return {closed, dual, fd};
}

/// Runs the full suite: mse, nll, pi, picp and dpi losses through random
/// networks of at most 3 layers and 8 units, plus the NLL closed-form checks.
inline GradcheckReport run_gradcheck(const GradcheckOptions& o = {}) {
  GradcheckReport rep;
  Engine eng = make_engine(o.seed, Stream::kGradcheck);
  const Eigen::Index n = o.batch;
  const Eigen::Index d = 3;
  Matrix x(n, d);
  Vector y(n), mu_fixed(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = uniform(eng, -1.0, 1.0);
    y(i) = uniform(eng, -1.0, 1.0);
    mu_fixed(i) = uniform(eng, -0.5, 0.5);
  }
  auto net_seed = [&](std::uint64_t k) { return derive_seed(o.seed, Stream::kGradcheck, k); };

  rep.rows.push_back(check_network_gradient(
      "mse_loss", detail::random_chain(x, {8, 6}, 1, net_seed(1)), x,
      [&](const Matrix& out, Matrix* g) {
        const MseResult r = mse_loss(out.col(0), y);
        if (g) g->col(0) = r.grad_mu;
        return r.value;
      },
      o));

  rep.rows.push_back(check_network_gradient(
      "nll_loss", detail::random_chain(x, {8, 6}, 2, net_seed(2)), x,
      [&](const Matrix& out, Matrix* g) {
        const NllResult r = nll_loss(out.col(0), out.col(1), y);
        if (g) {
          g->col(0) = r.grad_mu;
          g->col(1) = r.grad_logvar;
        }
        return r.value;
      },
      o));

  // Interval losses: the network emits raw widths, the mean is held fixed.
  auto widths = [](const Matrix& out, Eigen::Index c) { return detail::softplus(out.col(c)); };
  auto chain = [](const Matrix& out, Eigen::Index c) { return detail::logistic(out.col(c)); };

  rep.rows.push_back(check_network_gradient(
      "pi_loss", detail::random_chain(x, {8, 6}, 2, net_seed(3)), x,
      [&](const Matrix& out, Matrix* g) {
        const WidthLossResult r = pi_loss(mu_fixed, widths(out, 0), widths(out, 1), y);
        if (g) {
          g->col(0) = r.grad_lambda_u.cwiseProduct(chain(out, 0));
          g->col(1) = r.grad_lambda_l.cwiseProduct(chain(out, 1));
        }
        return r.value;
      },
      o));

  const DpiWeights w;
  rep.rows.push_back(check_network_gradient(
      "picp_loss", detail::random_chain(x, {8, 6}, 2, net_seed(4)), x,
      [&](const Matrix& out, Matrix* g) {
        const BoundLossResult r = picp_loss(mu_fixed - widths(out, 1), mu_fixed + widths(out, 0), y, w);
        if (g) {
          g->col(0) = r.grad_upper.cwiseProduct(chain(out, 0));
          g->col(1) = (-r.grad_lower).cwiseProduct(chain(out, 1));
        }
        return r.value;
      },
      o));

  rep.rows.push_back(check_network_gradient(
      "dpi_loss", detail::random_chain(x, {8, 6}, 2, net_seed(5)), x,
      [&](const Matrix& out, Matrix* g) {
        const DpiLossResult r = dpi_loss(mu_fixed, widths(out, 0), widths(out, 1), y, w);
        if (g) {
          g->col(0) = r.grad_lambda_u.cwiseProduct(chain(out, 0));
          g->col(1) = r.grad_lambda_l.cwiseProduct(chain(out, 1));
        }
        return r.value;
      },
      o));

  for (auto& row : check_nll_closed_forms(o)) rep.rows.push_back(std::move(row));
  return rep;
}

}  // namespace dpin
