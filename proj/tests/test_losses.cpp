#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "dpin/losses.hpp"
#include "dpin/rng.hpp"

using namespace dpin;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

Vector random_vec(Eigen::Index n, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  Engine eng = make_engine(seed, Stream::kTraining);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = uniform(eng, lo, hi);
  return v;
}

// Central difference of f along coordinate i of v.
double fd(std::function<double(const Vector&)> f, Vector v, Eigen::Index i, double h = 1e-6) {
  const double keep = v(i);
  v(i) = keep + h;
  const double up = f(v);
  v(i) = keep - h;
  const double dn = f(v);
  return (up - dn) / (2 * h);
}

double logistic_ref(double t) { return 1.0 / (1.0 + std::exp(-t)); }

}  // namespace

TEST(Mse, Examples) {
  auto r = mse_loss(vec({1, 1}), vec({1, 1}));
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.grad_mu.cwiseAbs().maxCoeff(), 0.0);
  r = mse_loss(vec({0}), vec({2}));
  EXPECT_DOUBLE_EQ(r.value, 4.0);
  EXPECT_DOUBLE_EQ(r.grad_mu(0), -4.0);
}

TEST(Mse, MatchesTwoPassOracle) {
  const Vector mu = random_vec(7, 1), y = random_vec(7, 2);
  double s = 0.0;
  for (int i = 0; i < 7; ++i) s += (y(i) - mu(i)) * (y(i) - mu(i));
  const auto r = mse_loss(mu, y);
  EXPECT_NEAR(r.value, s / 7.0, 1e-14);
  for (int i = 0; i < 7; ++i) EXPECT_NEAR(r.grad_mu(i), 2.0 * (mu(i) - y(i)) / 7.0, 1e-15);
}

TEST(Mse, EmptyBatchRejected) { EXPECT_THROW(mse_loss(Vector(0), Vector(0)), ValidationError); }

TEST(Nll, ZeroAtModeWithUnitVariance) {
  const auto r = nll_loss(vec({0.3}), vec({0.0}), vec({0.3}));
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.grad_mu(0), 0.0);
}

TEST(Nll, VarianceStationaryWhenResidualSquaredEqualsVariance) {
  const double var = 2.25;
  const auto r = nll_loss(vec({1.0}), vec({std::log(var)}), vec({1.0 + 1.5}));
  EXPECT_NEAR(r.grad_var(0), 0.0, 1e-15);
  EXPECT_NEAR(nll_grad_var_closed_form(1.0, var, 2.5), 0.0, 1e-15);
}

TEST(Nll, GradientsMatchFiniteDifferences) {
  const Vector mu = random_vec(9, 3), lv = random_vec(9, 4, -1.0, 1.0), y = random_vec(9, 5);
  const auto r = nll_loss(mu, lv, y);
  for (Eigen::Index i = 0; i < 9; ++i) {
    EXPECT_NEAR(r.grad_mu(i), fd([&](const Vector& m) { return nll_loss(m, lv, y).value; }, mu, i), 1e-8);
    EXPECT_NEAR(r.grad_logvar(i), fd([&](const Vector& v) { return nll_loss(mu, v, y).value; }, lv, i), 1e-8);
  }
}

TEST(Nll, ClosedFormsAgreeWithBatchGradients) {
  const Vector mu = random_vec(6, 6), lv = random_vec(6, 7, -1.0, 1.0), y = random_vec(6, 8);
  const auto r = nll_loss(mu, lv, y);
  for (Eigen::Index i = 0; i < 6; ++i) {
    const double var = std::exp(lv(i));
    EXPECT_NEAR(r.grad_mu(i) * 6.0, nll_grad_mu_closed_form(mu(i), var, y(i)), 1e-12);
    // The closed form for the variance is -2x the derivative of the per-sample loss.
    EXPECT_NEAR(-2.0 * r.grad_var(i) * 6.0, nll_grad_var_closed_form(mu(i), var, y(i)), 1e-12);
    EXPECT_NEAR(r.grad_logvar(i), r.grad_var(i) * var, 1e-15);
  }
}

TEST(Nll, RejectsNonFiniteLogVariance) {
  EXPECT_THROW(nll_loss(vec({0}), vec({INFINITY}), vec({0})), ValidationError);
}

TEST(PiLoss, ResidualMatchingWidthContributesNothing) {
  EXPECT_EQ(pi_loss(vec({0}), vec({1}), vec({0.2}), vec({1})).value, 0.0);
}

TEST(PiLoss, TwoSampleHandValue) {
  const auto r = pi_loss(vec({0, 0}), vec({0.5, 9.0}), vec({9.0, 1.0}), vec({1, -2}));
  EXPECT_DOUBLE_EQ(r.value, 0.625);
}

TEST(PiLoss, TieGoesToLowerBranch) {
  const auto r = pi_loss(vec({0.4}), vec({3.0}), vec({0.7}), vec({0.4}));
  EXPECT_DOUBLE_EQ(r.value, 0.49);
  EXPECT_EQ(r.grad_lambda_u(0), 0.0);
  EXPECT_DOUBLE_EQ(r.grad_lambda_l(0), 1.4);
}

TEST(PiLoss, InactiveBoundDoesNotMatter) {
  const Vector mu = random_vec(10, 9), y = random_vec(10, 10);
  const Vector lu = random_vec(10, 11, 0.1, 2.0), ll = random_vec(10, 12, 0.1, 2.0);
  const double base = pi_loss(mu, lu, ll, y).value;
  for (Eigen::Index i = 0; i < 10; ++i) {
    Vector lu2 = lu, ll2 = ll;
    if (y(i) > mu(i))
      ll2(i) += 5.0;
    else
      lu2(i) += 5.0;
    EXPECT_EQ(pi_loss(mu, lu2, ll2, y).value, base);
  }
}

TEST(PiLoss, GradientsMatchFiniteDifferences) {
  const Vector mu = random_vec(8, 13), y = random_vec(8, 14);
  const Vector lu = random_vec(8, 15, 0.1, 2.0), ll = random_vec(8, 16, 0.1, 2.0);
  const auto r = pi_loss(mu, lu, ll, y);
  for (Eigen::Index i = 0; i < 8; ++i) {
    EXPECT_NEAR(r.grad_lambda_u(i), fd([&](const Vector& v) { return pi_loss(mu, v, ll, y).value; }, lu, i), 1e-8);
    EXPECT_NEAR(r.grad_lambda_l(i), fd([&](const Vector& v) { return pi_loss(mu, lu, v, y).value; }, ll, i), 1e-8);
  }
}

TEST(PiLoss, MinimizerIsMeanPositiveResidual) {
  // One bucket: a shared lambda_u. Gradient descent on the loss must land on
  // the mean of the positive residuals.
  const Eigen::Index n = 200;
  const Vector y = random_vec(n, 17, -1.0, 3.0);
  const Vector mu = Vector::Zero(n);
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (y(i) > 0.0) {
      sum += y(i);
      ++count;
    }
  const double closed_form = sum / count;
  double lam = 0.1;
  for (int it = 0; it < 2000; ++it) {
    const auto r = pi_loss(mu, Vector::Constant(n, lam), Vector::Ones(n), y);
    lam -= 0.5 * r.grad_lambda_u.sum() * static_cast<double>(n) / count;
  }
  EXPECT_NEAR(lam, closed_form, 1e-10);
}

TEST(PicpHard, Examples) {
  EXPECT_EQ(picp_hard(vec({0, 0, 0}), vec({4, 4, 4}), vec({1, 2, 3})), 1.0);
  EXPECT_EQ(picp_hard(vec({0, 0}), vec({2, 2}), vec({1, 5})), 0.5);
  EXPECT_EQ(picp_hard(vec({1}), vec({2}), vec({2})), 1.0);
  EXPECT_EQ(picp_hard(vec({1}), vec({2}), vec({1})), 1.0);
}

TEST(PicpHard, MatchesCountLoop) {
  const Vector y = random_vec(20, 18), c = random_vec(20, 19);
  const Vector lo = c - random_vec(20, 20, 0.0, 1.5), hi = c + random_vec(20, 21, 0.0, 1.5);
  int inside = 0;
  for (int i = 0; i < 20; ++i)
    if (lo(i) <= y(i) && y(i) <= hi(i)) ++inside;
  EXPECT_EQ(picp_hard(lo, hi, y), inside / 20.0);
}

TEST(PicpHard, MonotoneInBounds) {
  const Vector y = random_vec(30, 22), c = random_vec(30, 23);
  Vector lo = c.array() - 0.3, hi = c.array() + 0.3;
  double prev = picp_hard(lo, hi, y);
  for (int i = 0; i < 30; ++i) {
    hi(i) += 1.0;
    const double now = picp_hard(lo, hi, y);
    EXPECT_GE(now, prev);
    prev = now;
  }
}

TEST(PicpHard, CrossedBoundsRejected) {
  EXPECT_THROW(picp_hard(vec({1}), vec({0}), vec({0.5})), ValidationError);
}

TEST(PicpSoft, SaturatesInsideWideInterval) {
  EXPECT_NEAR(picp_soft(vec({-10}), vec({10}), vec({0}), 160.0).value, 1.0, 1e-6);
}

TEST(PicpSoft, TargetOnUpperBoundGivesHalf) {
  const double lo = -0.02, hi = 0.5;
  const double v = picp_soft(vec({lo}), vec({hi}), vec({hi}), 160.0).value;
  EXPECT_NEAR(v, logistic_ref(160.0 * (hi - lo)) * 0.5, 1e-15);
}

TEST(PicpSoft, CloseToHardAwayFromBounds) {
  Engine eng = make_engine(24, Stream::kTraining);
  const int n = 50;
  Vector lo(n), hi(n), y(n);
  for (int i = 0; i < n; ++i) {
    lo(i) = uniform(eng, -1, 0);
    hi(i) = lo(i) + uniform(eng, 0.3, 2);
    do y(i) = uniform(eng, -2, 2);
    while (std::abs(y(i) - lo(i)) < 0.1 || std::abs(y(i) - hi(i)) < 0.1);
  }
  double bound = 0.0;
  for (int i = 0; i < n; ++i)
    bound += 2.0 * logistic_ref(-160.0 * std::min(std::abs(y(i) - lo(i)), std::abs(y(i) - hi(i))));
  const double diff = std::abs(picp_soft(lo, hi, y, 160.0).value - picp_hard(lo, hi, y));
  EXPECT_LE(diff, 1e-3);
  EXPECT_LE(diff, bound / n + 1e-15);
}

TEST(PicpLoss, Values) {
  // Single sample with soft coverage c gives loss (0.95 - c)^2.
  DpiWeights w;
  w.softening = 1.0;
  // logistic(a)*logistic(b) with b large: pick a so logistic(a) = 0.85.
  const double a = std::log(0.85 / 0.15);
  const auto r = picp_loss(vec({-a}), vec({60.0}), vec({0.0}), w);
  EXPECT_NEAR(r.value, 0.01, 1e-12);
  const double a95 = std::log(0.95 / 0.05);
  EXPECT_NEAR(picp_loss(vec({-a95}), vec({60.0}), vec({0.0}), w).value, 0.0, 1e-20);
}

TEST(PicpLoss, GradientsMatchFiniteDifferences) {
  DpiWeights w;
  w.softening = 8.0;
  const Vector y = random_vec(12, 25), c = random_vec(12, 26);
  const Vector lo = c - random_vec(12, 27, 0.1, 1.0), hi = c + random_vec(12, 28, 0.1, 1.0);
  const auto r = picp_loss(lo, hi, y, w);
  for (Eigen::Index i = 0; i < 12; ++i) {
    EXPECT_NEAR(r.grad_lower(i), fd([&](const Vector& v) { return picp_loss(v, hi, y, w).value; }, lo, i), 1e-8);
    EXPECT_NEAR(r.grad_upper(i), fd([&](const Vector& v) { return picp_loss(lo, v, y, w).value; }, hi, i), 1e-8);
  }
}

TEST(DpiLoss, NoCoverageWeightEqualsPiLoss) {
  DpiWeights w;
  w.eta1 = 1.7;
  w.eta2 = 0.0;
  const Vector mu = random_vec(9, 29), y = random_vec(9, 30);
  const Vector lu = random_vec(9, 31, 0.1, 2), ll = random_vec(9, 32, 0.1, 2);
  const auto d = dpi_loss(mu, lu, ll, y, w);
  const auto p = pi_loss(mu, lu, ll, y);
  EXPECT_EQ(d.value, 1.7 * p.value);
  EXPECT_EQ(d.grad_lambda_u, 1.7 * p.grad_lambda_u);
}

TEST(DpiLoss, CalibratedCoverageAloneIsZero) {
  DpiWeights w;
  w.eta1 = 0.0;
  w.eta2 = 1.0;
  w.alpha = 0.5;
  w.softening = 1.0;
  // mu = 0, y = 0, lambda_u huge; logistic(lambda_l) = 0.5 requires lambda_l = 0.
  const auto d = dpi_loss(vec({0}), vec({80}), vec({0}), vec({0}), w);
  EXPECT_NEAR(d.value, 0.0, 1e-30);
}

TEST(DpiLoss, EqualsWeightedComponents) {
  const DpiWeights w;
  const Vector mu = random_vec(15, 33), y = random_vec(15, 34);
  const Vector lu = random_vec(15, 35, 0.0, 1.5), ll = random_vec(15, 36, 0.0, 1.5);
  const auto d = dpi_loss(mu, lu, ll, y, w);
  // Independent recomputation of both terms.
  double fit = 0.0, cov = 0.0;
  for (int i = 0; i < 15; ++i) {
    const double r = y(i) - mu(i);
    fit += r > 0 ? (lu(i) - r) * (lu(i) - r) : (ll(i) + r) * (ll(i) + r);
    cov += logistic_ref(160.0 * (y(i) - (mu(i) - ll(i)))) * logistic_ref(160.0 * (mu(i) + lu(i) - y(i)));
  }
  fit /= 15.0;
  cov /= 15.0;
  EXPECT_NEAR(d.value, 1.0 * fit + 10.0 * (0.95 - cov) * (0.95 - cov), 1e-12);
  EXPECT_NEAR(d.pi_value, fit, 1e-12);
}

TEST(DpiLoss, GradientsMatchFiniteDifferences) {
  DpiWeights w;
  w.softening = 6.0;
  const Vector mu = random_vec(10, 37), y = random_vec(10, 38);
  const Vector lu = random_vec(10, 39, 0.1, 1.5), ll = random_vec(10, 40, 0.1, 1.5);
  const auto r = dpi_loss(mu, lu, ll, y, w);
  for (Eigen::Index i = 0; i < 10; ++i) {
    EXPECT_NEAR(r.grad_lambda_u(i), fd([&](const Vector& v) { return dpi_loss(mu, v, ll, y, w).value; }, lu, i), 1e-7);
    EXPECT_NEAR(r.grad_lambda_l(i), fd([&](const Vector& v) { return dpi_loss(mu, lu, v, y, w).value; }, ll, i), 1e-7);
  }
}

TEST(DpiLoss, DegenerateWeightsRejected) {
  DpiWeights w;
  w.eta1 = 0.0;
  w.eta2 = 0.0;
  EXPECT_THROW(dpi_loss(vec({0}), vec({1}), vec({1}), vec({0}), w), ValidationError);
}
