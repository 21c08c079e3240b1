#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smjls/phase_model.hpp"

namespace smjls {

namespace poly {
// Polynomials as ascending coefficient vectors: p[0] + p[1] s + ...

inline std::vector<double> mul(const std::vector<double>& p,
                               const std::vector<double>& q) {
  std::vector<double> r(p.size() + q.size() - 1, 0.0);
  for (size_t i = 0; i < p.size(); ++i)
    for (size_t j = 0; j < q.size(); ++j) r[i + j] += p[i] * q[j];
  return r;
}

inline double eval(const std::vector<double>& p, double s) {
  double v = 0.0;
  for (size_t i = p.size(); i-- > 0;) v = v * s + p[i];
  return v;
}
}  // namespace poly

/// Strictly proper rational transfer function
///   H(s) = (b1 s^{m-1} + ... + bm) / (s^m + a1 s^{m-1} + ... + am)
/// stored as descending-power coefficient lists a = (a1..am), b = (b1..bm).
class RationalModel {
 public:
  RationalModel(std::vector<double> num_desc, std::vector<double> den_desc)
      : b_(std::move(num_desc)), a_(std::move(den_desc)) {
    if (a_.empty() || b_.size() != a_.size())
      throw std::invalid_argument("RationalModel: need m numerator and m denominator coefficients");
  }

  /// From ascending-coefficient polynomials; denominator leading coefficient
  /// is divided out (monic form), numerator degree must be < denominator degree.
  static RationalModel from_polynomials(const std::vector<double>& num_asc,
                                        const std::vector<double>& den_asc) {
    if (den_asc.size() < 2) throw std::invalid_argument("from_polynomials: order >= 1 required");
    if (num_asc.size() >= den_asc.size())
      throw std::invalid_argument("from_polynomials: not strictly proper");
    const size_t m = den_asc.size() - 1;
    const double lead = den_asc.back();
    if (lead == 0.0) throw std::invalid_argument("from_polynomials: zero leading coefficient");
    std::vector<double> a(m), b(m, 0.0);
    for (size_t i = 0; i < m; ++i) a[i] = den_asc[m - 1 - i] / lead;  // a1..am
    for (size_t i = 0; i < num_asc.size(); ++i) b[m - 1 - i] = num_asc[i] / lead;
    return RationalModel(std::move(b), std::move(a));
  }

  size_t order() const { return a_.size(); }
  const std::vector<double>& num() const { return b_; }
  const std::vector<double>& den() const { return a_; }

  double dc_gain() const {
    if (a_.back() == 0.0) throw std::domain_error("dc_gain: pole at origin");
    return b_.back() / a_.back();
  }

  RationalModel normalized_dc() const {
    const double g = dc_gain();
    if (g == 0.0) throw std::domain_error("normalized_dc: zero DC gain");
    std::vector<double> b = b_;
    for (double& v : b) v /= g;
    return RationalModel(std::move(b), a_);
  }

  /// Companion ("controller canonical") state matrix.
  Matrix companion() const {
    const auto m = static_cast<Eigen::Index>(order());
    Matrix pi = Matrix::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) pi(i, 0) = -a_[static_cast<size_t>(i)];
    pi.topRightCorner(m - 1, m - 1).setIdentity();
    return pi;
  }

  std::vector<std::complex<double>> poles() const {
    const Eigen::VectorXcd ev = companion().eigenvalues();
    return {ev.data(), ev.data() + ev.size()};
  }

  bool stable() const {
    for (const auto& p : poles())
      if (p.real() >= 0.0) return false;
    return true;
  }

  double dominant_decay_rate() const {
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& p : poles()) mx = std::max(mx, p.real());
    return -mx;
  }

  /// h(t) = e1' exp(Pi_c t) b on the given times, via eigendecomposition of
  /// the companion matrix (falls back to expm near-defective cases).
  std::vector<double> impulse_response(const std::vector<double>& times) const {
    const auto m = static_cast<Eigen::Index>(order());
    const Matrix pi = companion();
    Vector eta(m);
    for (Eigen::Index i = 0; i < m; ++i) eta(i) = b_[static_cast<size_t>(i)];
    Eigen::EigenSolver<Matrix> es(pi);
    const Eigen::VectorXcd w = es.eigenvalues();
    const Eigen::MatrixXcd V = es.eigenvectors();
    const auto lu = V.partialPivLu();
    Eigen::VectorXcd c2 = lu.solve(eta.cast<std::complex<double>>());
    Eigen::RowVectorXcd c1 = Eigen::RowVectorXcd::Unit(m, 0) * V;
    std::vector<double> h(times.size());
    // clustered or repeated poles make V ill-conditioned; fall back to expm
    if (c2.allFinite() && lu.rcond() > 1e-7) {
      for (size_t k = 0; k < times.size(); ++k) {
        std::complex<double> v = 0.0;
        for (Eigen::Index i = 0; i < m; ++i)
          v += c1(i) * c2(i) * std::exp(w(i) * times[k]);
        h[k] = v.real();
      }
    } else {
      for (size_t k = 0; k < times.size(); ++k)
        h[k] = ((pi * times[k]).exp() * eta)(0);
    }
    return h;
  }

  double impulse_at(double t) const { return impulse_response({t})[0]; }

 private:
  std::vector<double> b_, a_;  // descending: b1..bm, a1..am
};

struct CompensatorReport {
  double z0 = 0.0, p0 = 0.0;
  double min_impulse = 0.0;      // grid check on the compensated response
  double error_bound_l1 = 0.0;   // 2 (1 - p0/z0) ||h||_1
  double error_bound_l2 = 0.0;
};

/// W(s) H(s) with W(s) = (p0/z0)(s + z0)/(s + p0); result renormalized to
/// exactly unit DC gain. Order grows by one.
inline RationalModel compensate(const RationalModel& model, double z0, double p0,
                                CompensatorReport* report = nullptr,
                                const std::vector<double>* check_times = nullptr) {
  if (p0 <= 0.0 || z0 < p0) throw std::domain_error("compensate: need z0 >= p0 > 0");
  const size_t m = model.order();
  std::vector<double> num_asc(m), den_asc(m + 1);
  for (size_t i = 0; i < m; ++i) num_asc[i] = model.num()[m - 1 - i];
  den_asc[m] = 1.0;
  for (size_t i = 0; i < m; ++i) den_asc[i] = model.den()[m - 1 - i];
  auto numc = poly::mul(num_asc, {z0, 1.0});
  for (double& v : numc) v *= p0 / z0;
  const auto denc = poly::mul(den_asc, {p0, 1.0});
  auto out = RationalModel::from_polynomials(numc, denc).normalized_dc();
  if (report) {
    report->z0 = z0;
    report->p0 = p0;
    std::vector<double> h;
    if (check_times) {
      h = model.impulse_response(*check_times);
      const auto hc = out.impulse_response(*check_times);
      report->min_impulse = *std::min_element(hc.begin(), hc.end());
      const double dt = check_times->size() > 1 ? (*check_times)[1] - (*check_times)[0] : 0.0;
      double l1 = 0.0, l2 = 0.0;
      for (double v : h) {
        l1 += std::abs(v) * dt;
        l2 += v * v * dt;
      }
      report->error_bound_l1 = 2.0 * (1.0 - p0 / z0) * l1;
      report->error_bound_l2 = 2.0 * (1.0 - p0 / z0) * std::sqrt(l2);
    }
  }
  return out;
}

/// Canonical ME realization of a stable, strictly proper, unit-DC-gain rational
/// model: companion triple conjugated by the unit-lower-triangular T with
/// t_{i1} = a_{i-1} - b_{i-1} - 1, which restores eta = -Pi*1 and alpha = e1.
inline PhaseModel to_me_realization(const RationalModel& model) {
  const size_t m = model.order();
  if (std::abs(model.dc_gain() - 1.0) > 1e-9)
    throw std::domain_error("to_me_realization: DC gain must be 1");
  if (!model.stable()) throw std::domain_error("to_me_realization: model unstable");
  const auto mi = static_cast<Eigen::Index>(m);
  Matrix T = Matrix::Identity(mi, mi);
  for (size_t i = 2; i <= m; ++i)
    T(static_cast<Eigen::Index>(i - 1), 0) = model.den()[i - 2] - model.num()[i - 2] - 1.0;
  const Matrix pi_c = model.companion();
  const auto lu = T.partialPivLu();
  const Matrix pi = lu.solve(pi_c * T);
  return PhaseModel(pi, PhaseKind::ME);
}

}  // namespace smjls
