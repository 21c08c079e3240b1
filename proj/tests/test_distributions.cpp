#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "smjls/phase_model.hpp"
#include "smjls/quadrature.hpp"
#include "smjls/rational.hpp"

using namespace smjls;

namespace {

PhaseModel example_coxian() {
  return PhaseModel::coxian({-10.0, -5.0, -0.01}, {1.0, 1.0});
}

PhaseModel me_from_example_transform() {
  // L[f] = (s^2+1)/(s+1)^3 with f(t) = exp(-t)(t-1)^2
  return to_me_realization(
      RationalModel::from_polynomials({1.0, 0.0, 1.0}, {1.0, 3.0, 3.0, 1.0}));
}

}  // namespace

TEST_CASE("triple invariants hold at construction") {
  const PhaseModel cox = example_coxian();
  const Vector residual = cox.exit_vector() + cox.sub_generator() * Vector::Ones(3);
  CHECK(residual.lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK(cox.start_vector()(0) == 1.0);
  CHECK(cox.start_vector().tail(2).isZero(0.0));
  CHECK(cox.exit_vector()(0) == Catch::Approx(9.0));
  CHECK(cox.exit_vector()(1) == Catch::Approx(4.0));
  CHECK(cox.exit_vector()(2) == Catch::Approx(0.01));
}

TEST_CASE("non-Hurwitz sub-generators are rejected") {
  Matrix bad(1, 1);
  bad(0, 0) = 1.0;
  CHECK_THROWS_AS(PhaseModel(bad, PhaseKind::PH), std::invalid_argument);
}

TEST_CASE("pdf of a single phase at the origin equals the rate") {
  const PhaseModel e = PhaseModel::exponential(0.1);
  CHECK(e.pdf_at(0.0) == Catch::Approx(0.1).margin(1e-14));
  CHECK_THROWS_AS(e.pdf_at(-1.0), std::domain_error);
}

TEST_CASE("matrix-exponential density of exp(-t)(t-1)^2") {
  const PhaseModel me = me_from_example_transform();
  CHECK(std::abs(me.pdf_at(1.0)) <= 1e-10);
  CHECK(me.pdf_at(0.0) == Catch::Approx(1.0).epsilon(1e-10));
  for (double t : {0.3, 0.7, 2.0, 5.0})
    CHECK(me.pdf_at(t) ==
          Catch::Approx(std::exp(-t) * (t - 1.0) * (t - 1.0)).margin(1e-10));
}

TEST_CASE("survival function values") {
  const PhaseModel e = PhaseModel::exponential(0.1);
  CHECK(e.ccdf_at(0.0) == Catch::Approx(1.0));
  CHECK(e.ccdf_at(10.0) == Catch::Approx(std::exp(-1.0)).epsilon(1e-10));
  CHECK_THROWS_AS(e.ccdf_at(-0.5), std::domain_error);

  const PhaseModel cox = example_coxian();
  double prev = 1.0;
  for (double t : {0.5, 1.0, 2.0, 5.0, 50.0, 500.0}) {
    const double s = cox.ccdf_at(t);
    CHECK(s < prev);
    prev = s;
  }
  CHECK(cox.ccdf_at(2000.0) < 1e-8);
}

TEST_CASE("ccdf matches one minus the integrated pdf") {
  const PhaseModel cox = example_coxian();
  for (double t : {0.1, 0.5, 1.0, 3.0, 10.0, 100.0}) {
    const double integral =
        integrate([&](double s) { return cox.pdf_at(s); }, 0.0, t, 1e-12);
    CHECK(cox.ccdf_at(t) == Catch::Approx(1.0 - integral).margin(1e-6));
  }
}

TEST_CASE("moments: closed forms and the quadrature oracle") {
  const PhaseModel e = PhaseModel::exponential(2.0);
  CHECK(e.moment(1) == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(e.moment(2) == Catch::Approx(0.5).epsilon(1e-12));  // 2 / lambda^2

  const PhaseModel cox = example_coxian();
  CHECK(cox.moment(1) == Catch::Approx(2.12).margin(1e-6));

  const double horizon = cox.truncation_horizon();
  CHECK(cox.ccdf_at(horizon) < 1e-10);
  for (int n : {1, 2, 3}) {
    const double scale = std::abs(cox.moment(n));
    const double oracle = integrate(
        [&](double t) { return std::pow(t, n) * cox.pdf_at(t); }, 0.0, horizon,
        1e-8 * scale);
    CHECK(cox.moment(n) == Catch::Approx(oracle).epsilon(1e-4));
  }
}

TEST_CASE("validity reports") {
  const auto cox_rep = example_coxian().validate(10.0, 200);
  CHECK(cox_rep.valid);
  CHECK(cox_rep.sign_constraints_ok);
  CHECK(cox_rep.ph_representable);

  const auto me_rep = me_from_example_transform().validate(20.0, 2000);
  CHECK(me_rep.valid);
  CHECK(me_rep.integrates_to_one);
  CHECK_FALSE(me_rep.ph_representable);  // complex pole pair at -1 shares max real part
  CHECK(me_rep.detail == "not PH-representable");
}

TEST_CASE("general starting vectors are normalized to e1") {
  Matrix pi(2, 2);
  pi << -2.0, 1.0, 0.5, -3.0;
  Vector alpha(2);
  alpha << 0.3, 0.7;
  const PhaseModel mixed(pi, alpha, PhaseKind::PH);
  CHECK(mixed.start_vector()(0) == 1.0);
  // pdf must equal the alpha-weighted mixture of the original triple
  const Vector eta = -pi * Vector::Ones(2);
  for (double t : {0.0, 0.2, 1.0, 3.0}) {
    const double direct = (alpha.transpose() * (pi * t).exp() * eta)(0);
    CHECK(mixed.pdf_at(t) == Catch::Approx(direct).margin(1e-12));
  }
}

TEST_CASE("sampling: reproducibility and statistics") {
  RngStream a(42), b(42);
  const AnalyticLaw law{Exponential{2.0}};
  for (int i = 0; i < 16; ++i) CHECK(law.sample(a) == law.sample(b));

  RngStream rng(7);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += law.sample(rng);
  const double sigma = 0.5 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(sum / n - 0.5) <= 3.0 * sigma);
}

TEST_CASE("phase-walk draws of the Coxian match mean and cdf") {
  const PhaseModel cox = example_coxian();
  RngStream rng(123);
  const int n = 100000;
  std::vector<double> draws(n);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    draws[static_cast<size_t>(i)] = cox.sample(rng);
    sum += draws[static_cast<size_t>(i)];
  }
  const double var = cox.moment(2) - cox.moment(1) * cox.moment(1);
  CHECK(std::abs(sum / n - 2.12) <= 3.0 * std::sqrt(var / n));

  // Kolmogorov-Smirnov against the analytic cdf, 1% critical value
  std::sort(draws.begin(), draws.end());
  double d = 0.0;
  for (int i = 0; i < n; ++i) {
    const double F = cox.cdf_at(draws[static_cast<size_t>(i)]);
    d = std::max(d, std::abs(F - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - F));
  }
  CHECK(d < 1.6276 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("matrix-exponential models refuse the phase walk") {
  RngStream rng(1);
  CHECK_THROWS_AS(me_from_example_transform().sample(rng), std::runtime_error);
}

TEST_CASE("Weibull law: quantile, mean, pdf edge cases") {
  const AnalyticLaw w{Weibull{4.0, 1.0}};  // density 4 t^3 exp(-t^4)
  CHECK(w.quantile(0.5) == Catch::Approx(std::pow(std::log(2.0), 0.25)).epsilon(1e-12));
  CHECK(w.mean() == Catch::Approx(std::tgamma(1.25)).epsilon(1e-12));
  CHECK(w.pdf(0.0) == 0.0);
  CHECK(w.pdf(1.0) == Catch::Approx(4.0 * std::exp(-1.0)).epsilon(1e-12));
  CHECK_THROWS_AS(AnalyticLaw(Weibull{-1.0, 1.0}), std::invalid_argument);
}
