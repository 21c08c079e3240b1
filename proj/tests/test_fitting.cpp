#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "smjls/fitting.hpp"
#include "smjls/phase_model.hpp"
#include "smjls/quadrature.hpp"
#include "smjls/rational.hpp"

using namespace smjls;

namespace {

PdfSamples sample_weibull4(double horizon = 3.5, double step = 0.0005) {
  return PdfSamples::from_law(AnalyticLaw{Weibull{4.0, 1.0}}, horizon, step);
}

}  // namespace

TEST_CASE("discretized Laguerre basis is orthonormal") {
  const double beta = 1.0, h = 0.0002;
  const int n_pts = static_cast<int>(80.0 / h) + 1;
  std::vector<std::vector<double>> phi(13, std::vector<double>(static_cast<size_t>(n_pts)));
  for (int k = 0; k <= 12; ++k)
    for (int i = 0; i < n_pts; ++i)
      phi[static_cast<size_t>(k)][static_cast<size_t>(i)] = laguerre::basis(k, beta, h * i);
  for (int i = 0; i <= 12; ++i)
    for (int j = i; j <= 12; ++j) {
      std::vector<double> prod(static_cast<size_t>(n_pts));
      for (int p = 0; p < n_pts; ++p)
        prod[static_cast<size_t>(p)] =
            phi[static_cast<size_t>(i)][static_cast<size_t>(p)] *
            phi[static_cast<size_t>(j)][static_cast<size_t>(p)];
      const double inner = trapezoid(prod, h);
      CHECK(std::abs(inner - (i == j ? 1.0 : 0.0)) <= 1e-6);
    }
}

TEST_CASE("projection recovers an in-span exponential exactly") {
  const auto samples = PdfSamples::from_law(AnalyticLaw{Exponential{1.0}}, 40.0, 0.001);
  const auto fit = laguerre_fit(samples, 0, 1.0);
  CHECK(fit.residual_l2 < 1e-6);  // limited by trapezoid error in a0
  CHECK(fit.model.order() == 1);
  CHECK(fit.model.den()[0] == Catch::Approx(1.0).epsilon(1e-9));
  CHECK(fit.model.dc_gain() == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("projection residual is non-increasing in the order") {
  // horizon long enough that the high-order basis functions have decayed,
  // otherwise discrete orthogonality (and optimality) is lost to truncation
  const auto samples = sample_weibull4(12.0, 0.0005);
  double prev = std::numeric_limits<double>::infinity();
  for (int n = 1; n <= 12; ++n) {
    const auto fit = laguerre_fit(samples, n, 2.0);
    CHECK(fit.residual_l2 <= prev + 1e-6);
    prev = fit.residual_l2;
  }
}

TEST_CASE("out-of-span target: moderate order reaches a small residual") {
  const auto samples = PdfSamples::from_law(AnalyticLaw{Exponential{2.0}}, 25.0, 0.001);
  const auto fit = laguerre_fit(samples, 3, 1.0);
  // analytic projection coefficients a_k = sqrt(2)(2/3)(1/3)^k give a residual
  // of sqrt(1 - (8/9) sum (1/9)^k) = 1/81 before DC rescaling
  CHECK(fit.residual_l2 < 0.05);
  CHECK(fit.residual_l2 > 1.0 / 81.0 - 1e-3);
  CHECK(fit.model.dc_gain() == Catch::Approx(1.0).epsilon(1e-12));
  // independent quadrature oracle for the leading projection coefficient
  const double a0 = integrate(
      [](double t) { return 2.0 * std::exp(-2.0 * t) * laguerre::basis(0, 1.0, t); }, 0.0,
      25.0, 1e-12);
  CHECK(fit.coefficients[0] == Catch::Approx(a0).margin(1e-6));
}

TEST_CASE("pull-up: zero bump is the identity") {
  const auto samples = sample_weibull4();
  PullUpReport rep;
  const auto out = pull_up(samples, BumpSpec{0.0, 0.4, 0.0}, &rep);
  CHECK(out.values == samples.values);
  CHECK(rep.fpe_l1 == 1.0);
}

TEST_CASE("pull-up bounds the transient away from zero and obeys its error bound") {
  const auto samples = sample_weibull4();
  PullUpReport rep;
  const auto out = pull_up(samples, BumpSpec{30.0, 0.4, 0.0}, &rep);
  // bounded away from zero near the origin
  for (size_t i = 0; i < out.values.size() && out.time_at(i) < 0.3; ++i)
    CHECK(out.values[i] > 1e-4);
  CHECK(out.mass() == Catch::Approx(1.0).margin(1e-3));

  // | ||f-h|| - ||fbar-h|| | <= bound, for an arbitrary fixed h
  const auto h = PdfSamples::from_law(AnalyticLaw{Exponential{1.0}}, samples.horizon(),
                                      samples.step);
  auto l_norms = [&](const PdfSamples& a) {
    double l1 = 0.0, l2 = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
      const double d = a.values[i] - h.values[i];
      l1 += std::abs(d);
      l2 += d * d;
    }
    return std::pair{l1 * a.step, std::sqrt(l2 * a.step)};
  };
  const auto [f1, f2] = l_norms(samples);
  const auto [b1, b2] = l_norms(out);
  CHECK(std::abs(f1 - b1) <= rep.bound_l1 + 1e-9);
  CHECK(std::abs(f2 - b2) <= rep.bound_l2 + 1e-9);
}

TEST_CASE("unity compensator is the identity") {
  const RationalModel h({0.0, 2.0}, {3.0, 2.0});
  const auto out = compensate(h, 0.7, 0.7);
  for (double t : {0.0, 0.5, 1.0, 4.0})
    CHECK(out.impulse_at(t) == Catch::Approx(h.impulse_at(t)).margin(1e-10));
}

TEST_CASE("compensator error bound holds") {
  const RationalModel h({0.0, 0.0, 6.0}, {6.0, 11.0, 6.0});  // poles -1,-2,-3
  CompensatorReport rep;
  std::vector<double> grid;
  for (double t = 0.0; t <= 30.0; t += 0.002) grid.push_back(t);
  const double p0 = 0.4, z0 = 0.8;
  const auto out = compensate(h, z0, p0, &rep, &grid);
  CHECK_THROWS_AS(compensate(h, 0.2, 0.4), std::domain_error);
  CHECK(out.dc_gain() == Catch::Approx(1.0).epsilon(1e-12));
  double l1_diff = 0.0, l1_h = 0.0;
  const auto hv = h.impulse_response(grid);
  const auto hc = out.impulse_response(grid);
  for (size_t i = 0; i < grid.size(); ++i) {
    l1_diff += std::abs(hv[i] - hc[i]) * 0.002;
    l1_h += std::abs(hv[i]) * 0.002;
  }
  CHECK(l1_diff <= 2.0 * (1.0 - p0 / z0) * l1_h + 1e-9);
  CHECK(rep.error_bound_l1 == Catch::Approx(2.0 * (1.0 - p0 / z0) * l1_h).epsilon(1e-6));
}

TEST_CASE("canonical realization: one-phase exponential") {
  const RationalModel h({3.0}, {3.0});  // 3/(s+3)
  const PhaseModel model = to_me_realization(h);
  CHECK(model.dim() == 1);
  CHECK(model.sub_generator()(0, 0) == Catch::Approx(-3.0));
  CHECK(model.exit_vector()(0) == Catch::Approx(3.0));
}

TEST_CASE("canonical realization rejects bad inputs") {
  CHECK_THROWS_AS(to_me_realization(RationalModel({2.0}, {1.0})), std::domain_error);
  CHECK_THROWS_AS(to_me_realization(RationalModel({-1.0}, {-1.0})), std::domain_error);
}

TEST_CASE("realization round-trip against the analytic density") {
  const auto model = to_me_realization(
      RationalModel::from_polynomials({1.0, 0.0, 1.0}, {1.0, 3.0, 3.0, 1.0}));
  double sup = 0.0;
  for (int k = 0; k <= 4000; ++k) {
    const double t = 20.0 * k / 4000.0;
    sup = std::max(sup,
                   std::abs(model.pdf_at(t) - std::exp(-t) * (t - 1.0) * (t - 1.0)));
  }
  CHECK(sup <= 1e-8);
}

TEST_CASE("fit percent definition") {
  PdfSamples f, g, flat;
  f.step = g.step = flat.step = 0.01;
  for (int i = 0; i <= 2000; ++i) {
    f.values.push_back(std::exp(-0.01 * i));
    g.values.push_back(std::exp(-1.05 * 0.01 * i));
  }
  double mean = 0.0;
  for (double v : f.values) mean += v;
  flat.values.assign(f.values.size(), mean / static_cast<double>(f.values.size()));
  CHECK(fit_percent(f, f) == Catch::Approx(100.0));
  CHECK(fit_percent(f, flat) == Catch::Approx(0.0).margin(1e-9));
  CHECK(fit_percent(f, g) == Catch::Approx(96.42564684577243).margin(1e-6));
  PdfSamples wrong = g;
  wrong.values.pop_back();
  CHECK_THROWS_AS(fit_percent(f, wrong), std::domain_error);
}

TEST_CASE("pipeline: exponential target is exact") {
  PipelineReport rep;
  const PhaseModel model =
      fit_pipeline(AnalyticLaw{Exponential{0.5}}, 1, PipelineOptions{}, &rep);
  CHECK(model.dim() == 1);
  CHECK(model.sub_generator()(0, 0) == Catch::Approx(-0.5));
  CHECK(rep.fit_percent_pdf == Catch::Approx(100.0).margin(1e-6));
  CHECK_FALSE(rep.pulled_up);
  CHECK_FALSE(rep.compensated);
}

TEST_CASE("pipeline: order-6 Weibull fit is non-negative and accurate") {
  PipelineReport rep;
  const PhaseModel model =
      fit_pipeline(AnalyticLaw{Weibull{4.0, 1.0}}, 6, PipelineOptions{}, &rep);
  CHECK(model.dim() <= 7);  // the compensator stage may add one phase
  CHECK(rep.min_pdf >= -1e-9);
  CHECK(rep.fit_percent_pdf >= 85.0);
  const auto validity = model.validate(10.0, 10000);
  CHECK(validity.valid);
  CHECK(std::abs(validity.integral - 1.0) <= 1e-6);
  if (rep.pulled_up) {
    CHECK(rep.pull_up.bound_l1 >= 0.0);
    CHECK(rep.pull_up.bound_l2 >= 0.0);
  }
  if (rep.compensated) {
    CHECK(rep.compensator.error_bound_l1 >= 0.0);
    CHECK(rep.compensator.z0 >= rep.compensator.p0);
  }
}

TEST_CASE("pipeline: heavy-tailed Weibull at order 4 meets the cdf floor") {
  PipelineReport rep;
  const PhaseModel model =
      fit_pipeline(AnalyticLaw{Weibull{2.5, 11.25}}, 4, PipelineOptions{}, &rep);
  CHECK(rep.min_pdf >= -1e-9);
  CHECK(rep.fit_percent_cdf >= 95.0);
  CHECK(model.validate(60.0, 10000).valid);
}
