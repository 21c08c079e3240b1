#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smjls/phase_model.hpp"
#include "smjls/quadrature.hpp"
#include "smjls/rational.hpp"

namespace smjls {

/// Density samples on a uniform grid starting at t = 0.
struct PdfSamples {
  double step = 0.0;
  std::vector<double> values;

  double time_at(size_t i) const { return step * static_cast<double>(i); }
  double horizon() const { return step * static_cast<double>(values.size() - 1); }

  std::vector<double> times() const {
    std::vector<double> t(values.size());
    for (size_t i = 0; i < t.size(); ++i) t[i] = time_at(i);
    return t;
  }

  double mass() const { return trapezoid(values, step); }

  static PdfSamples from_law(const AnalyticLaw& law, double horizon, double step) {
    PdfSamples s;
    s.step = step;
    const auto n = static_cast<size_t>(std::ceil(horizon / step)) + 1;
    s.values.resize(n);
    for (size_t i = 0; i < n; ++i) s.values[i] = law.pdf(s.time_at(i));
    return s;
  }
};

/// Compactly supported bump b(t) = a0 exp(-1/(d0^2 - (t - tc)^2)).
struct BumpSpec {
  double amplitude = 0.0;   // a0
  double half_width = 0.0;  // d0
  double center = 0.0;      // tc

  double at(double t) const {
    const double d = t - center;
    const double g = half_width * half_width - d * d;
    return g > 0.0 ? amplitude * std::exp(-1.0 / g) : 0.0;
  }
};

struct PullUpReport {
  double e_l1 = 0.0, e_l2 = 0.0;
  double fpe_l1 = 1.0;       // ||f + e||_1
  double bound_l1 = 0.0;     // right side of the pull-up error bound, p = 1
  double bound_l2 = 0.0;     // p = 2
};

/// f_bar = (f + e) / ||f + e||_1 on the same grid.
inline PdfSamples pull_up(const PdfSamples& samples, const BumpSpec& bump,
                          PullUpReport* report = nullptr) {
  PdfSamples out = samples;
  std::vector<double> e(samples.values.size());
  for (size_t i = 0; i < e.size(); ++i) e[i] = bump.at(samples.time_at(i));
  for (size_t i = 0; i < e.size(); ++i) out.values[i] += e[i];
  const double norm1 = trapezoid(out.values, out.step);
  if (bump.amplitude != 0.0)
    for (double& v : out.values) v /= norm1;
  if (report) {
    double e1 = 0.0, e2 = 0.0, f1 = 0.0, f2 = 0.0;
    for (size_t i = 0; i < e.size(); ++i) {
      e1 += std::abs(e[i]);
      e2 += e[i] * e[i];
      f1 += std::abs(samples.values[i]);
      f2 += samples.values[i] * samples.values[i];
    }
    report->e_l1 = e1 * samples.step;
    report->e_l2 = std::sqrt(e2 * samples.step);
    report->fpe_l1 = bump.amplitude != 0.0 ? norm1 : 1.0;
    const double fl1 = f1 * samples.step;
    const double fl2 = std::sqrt(f2 * samples.step);
    report->bound_l1 =
        std::abs(1.0 - report->fpe_l1) / report->fpe_l1 * fl1 + report->e_l1 / report->fpe_l1;
    report->bound_l2 =
        std::abs(1.0 - report->fpe_l1) / report->fpe_l1 * fl2 + report->e_l2 / report->fpe_l1;
  }
  return out;
}

/// Normalized-RMSE accuracy: 100 (1 - ||f - fh|| / ||f - mean(f)||).
inline double fit_percent(const PdfSamples& actual, const PdfSamples& estimate) {
  if (actual.values.size() != estimate.values.size() ||
      std::abs(actual.step - estimate.step) > 1e-12 * std::max(actual.step, estimate.step))
    throw std::domain_error("fit_percent: grid mismatch");
  double mean = 0.0;
  for (double v : actual.values) mean += v;
  mean /= static_cast<double>(actual.values.size());
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < actual.values.size(); ++i) {
    const double d = actual.values[i] - estimate.values[i];
    const double c = actual.values[i] - mean;
    num += d * d;
    den += c * c;
  }
  return 100.0 * (1.0 - std::sqrt(num / den));
}

namespace laguerre {

/// phi_k(t) = sqrt(2 beta) e^{-beta t} L_k(2 beta t).
inline double basis(int k, double beta, double t) {
  const double x = 2.0 * beta * t;
  double lkm1 = 1.0, lk = 1.0 - x;  // L_0, L_1
  if (k == 0) lk = lkm1;
  for (int i = 1; i < k; ++i) {
    const double ln = ((2.0 * i + 1.0 - x) * lk - i * lkm1) / (i + 1.0);
    lkm1 = lk;
    lk = ln;
  }
  return std::sqrt(2.0 * beta) * std::exp(-beta * t) * lk;
}

}  // namespace laguerre

struct LaguerreFitResult {
  RationalModel model;
  double residual_l2 = 0.0;     // in-sample ||f - h||_2 on the grid
  bool ill_conditioned = false; // residual worse than the order n-1 fit
  std::vector<double> coefficients;
};

namespace detail {

inline RationalModel assemble_laguerre(const std::vector<double>& coeff, double beta) {
  const int n = static_cast<int>(coeff.size()) - 1;
  // H(s) = sum_k a_k sqrt(2b) (s-b)^k (s+b)^{n-k} / (s+b)^{n+1}, exact
  // polynomial arithmetic over the common denominator.
  std::vector<double> num(static_cast<size_t>(n) + 1, 0.0);
  for (int k = 0; k <= n; ++k) {
    std::vector<double> p{1.0};
    for (int i = 0; i < k; ++i) p = poly::mul(p, {-beta, 1.0});
    for (int i = 0; i < n - k; ++i) p = poly::mul(p, {beta, 1.0});
    for (size_t i = 0; i < p.size(); ++i)
      num[i] += coeff[static_cast<size_t>(k)] * std::sqrt(2.0 * beta) * p[i];
  }
  std::vector<double> den{1.0};
  for (int i = 0; i <= n; ++i) den = poly::mul(den, {beta, 1.0});
  return RationalModel::from_polynomials(num, den);
}

inline double grid_residual_l2(const PdfSamples& samples, const RationalModel& model) {
  const auto h = model.impulse_response(samples.times());
  double r = 0.0;
  for (size_t i = 0; i < h.size(); ++i) {
    const double d = h[i] - samples.values[i];
    r += d * d;
  }
  return std::sqrt(r * samples.step);
}

}  // namespace detail

/// Projection of the sampled pdf onto the order-(n+1) Laguerre rational basis,
/// rescaled to unit DC gain.
inline LaguerreFitResult laguerre_fit(const PdfSamples& samples, int order, double beta) {
  if (order < 0) throw std::invalid_argument("laguerre_fit: order >= 0");
  if (beta <= 0.0) throw std::invalid_argument("laguerre_fit: beta > 0");
  if (samples.mass() < 0.99)
    throw std::invalid_argument("laguerre_fit: samples cover < 99% of the mass");
  std::vector<double> coeff(static_cast<size_t>(order) + 1);
  std::vector<std::vector<double>> phi(static_cast<size_t>(order) + 1);
  for (int k = 0; k <= order; ++k) {
    auto& pk = phi[static_cast<size_t>(k)];
    pk.resize(samples.values.size());
    std::vector<double> y(samples.values.size());
    for (size_t i = 0; i < y.size(); ++i) {
      pk[i] = laguerre::basis(k, beta, samples.time_at(i));
      y[i] = samples.values[i] * pk[i];
    }
    coeff[static_cast<size_t>(k)] = trapezoid(y, samples.step);
  }
  // residual of the raw projection sum a_k phi_k (before DC rescaling and
  // free of the monomial-assembly round-off): monotone in the order
  auto superposition_residual = [&](size_t terms) {
    double r = 0.0;
    for (size_t i = 0; i < samples.values.size(); ++i) {
      double est = 0.0;
      for (size_t k = 0; k < terms; ++k) est += coeff[k] * phi[k][i];
      const double d = est - samples.values[i];
      r += d * d;
    }
    return std::sqrt(r * samples.step);
  };
  LaguerreFitResult res{detail::assemble_laguerre(coeff, beta).normalized_dc(),
                        superposition_residual(coeff.size()), false, coeff};
  if (order >= 1)
    res.ill_conditioned =
        res.residual_l2 > superposition_residual(coeff.size() - 1) * (1.0 + 1e-9) + 1e-12;
  return res;
}

struct PipelineOptions {
  std::optional<double> beta;          // default 1/mean, clamped
  std::optional<BumpSpec> bump;        // pull-up override; default heuristic
  bool allow_pull_up = true;
  bool polish = true;                  // Gauss-Newton refinement of the fit
  std::vector<double> ladder_p0_fractions{0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05};
  std::vector<double> ladder_z0_factors{1.01, 1.05, 1.1, 1.25, 1.5};
  double horizon = 0.0;                // 0 = auto (settle of the target law)
  double step = 0.0;                   // 0 = auto
};

struct PipelineReport {
  double fit_percent_pdf = 0.0;
  double fit_percent_cdf = 0.0;
  double min_pdf = 0.0;
  bool pulled_up = false;
  bool polished = false;
  bool penalty_stage = false;
  bool compensated = false;
  PullUpReport pull_up;
  CompensatorReport compensator;
  std::optional<RationalModel> pre_compensation;  // base the compensator widened
  std::string notes;
};

struct PipelineFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Levenberg-Marquardt refinement of the rational coefficients against the
/// sampled density. Optional hinge penalty drives the impulse response
/// non-negative (weight w, target margin) on an extended grid.
inline RationalModel polish_rational(const RationalModel& init, const PdfSamples& samples,
                                     double penalty_weight = 0.0, double margin = 0.0,
                                     const std::vector<double>* penalty_times = nullptr,
                                     int max_iters = 60) {
  const size_t m = init.order();
  const size_t np = 2 * m;
  // subsample the fit grid to keep the Jacobian cheap
  const size_t stride = std::max<size_t>(1, samples.values.size() / 700);
  std::vector<double> tfit, ffit;
  for (size_t i = 0; i < samples.values.size(); i += stride) {
    tfit.push_back(samples.time_at(i));
    ffit.push_back(samples.values[i]);
  }
  const std::vector<double> no_pen;
  const std::vector<double>& tpen = penalty_times ? *penalty_times : no_pen;

  auto unpack = [m](const Eigen::VectorXd& th) {
    std::vector<double> b(m), a(m);
    for (size_t i = 0; i < m; ++i) b[i] = th(static_cast<Eigen::Index>(i));
    for (size_t i = 0; i < m; ++i) a[i] = th(static_cast<Eigen::Index>(m + i));
    return RationalModel(std::move(b), std::move(a));
  };
  auto residual = [&](const Eigen::VectorXd& th, Eigen::VectorXd& r) -> bool {
    const RationalModel mdl = unpack(th);
    if (!mdl.stable()) return false;
    const auto h = mdl.impulse_response(tfit);
    r.resize(static_cast<Eigen::Index>(tfit.size() + tpen.size()));
    for (size_t i = 0; i < tfit.size(); ++i)
      r(static_cast<Eigen::Index>(i)) = h[i] - ffit[i];
    if (!tpen.empty()) {
      const auto hp = mdl.impulse_response(tpen);
      for (size_t i = 0; i < tpen.size(); ++i)
        r(static_cast<Eigen::Index>(tfit.size() + i)) =
            penalty_weight * std::min(hp[i] - margin, 0.0);
    }
    return r.allFinite();
  };

  Eigen::VectorXd theta(static_cast<Eigen::Index>(np));
  for (size_t i = 0; i < m; ++i) theta(static_cast<Eigen::Index>(i)) = init.num()[i];
  for (size_t i = 0; i < m; ++i) theta(static_cast<Eigen::Index>(m + i)) = init.den()[i];

  Eigen::VectorXd r;
  if (!residual(theta, r)) return init;
  double cost = r.squaredNorm();
  double lambda = 1e-3;
  for (int it = 0; it < max_iters; ++it) {
    // forward-difference Jacobian
    Eigen::MatrixXd J(r.size(), static_cast<Eigen::Index>(np));
    bool ok = true;
    for (size_t p = 0; p < np; ++p) {
      const double h0 = 1e-7 * std::max(1.0, std::abs(theta(static_cast<Eigen::Index>(p))));
      Eigen::VectorXd tp = theta;
      tp(static_cast<Eigen::Index>(p)) += h0;
      Eigen::VectorXd rp;
      if (!residual(tp, rp)) {
        ok = false;
        break;
      }
      J.col(static_cast<Eigen::Index>(p)) = (rp - r) / h0;
    }
    if (!ok) break;
    const Eigen::MatrixXd JtJ = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    bool accepted = false;
    for (int tries = 0; tries < 12; ++tries) {
      Eigen::MatrixXd Areg = JtJ;
      Areg.diagonal() += lambda * JtJ.diagonal().cwiseMax(1e-12);
      const Eigen::VectorXd step = Areg.ldlt().solve(g);
      const Eigen::VectorXd cand = theta - step;
      Eigen::VectorXd rc;
      if (residual(cand, rc) && rc.squaredNorm() < cost) {
        theta = cand;
        r = rc;
        cost = rc.squaredNorm();
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 4.0;
    }
    if (!accepted || g.lpNorm<Eigen::Infinity>() < 1e-12) break;
  }
  return unpack(theta);
}

inline double min_impulse(const RationalModel& mdl, const std::vector<double>& times) {
  const auto h = mdl.impulse_response(times);
  return *std::min_element(h.begin(), h.end());
}

}  // namespace detail

/// End-to-end density fit: sample the law, optionally pull up the transient,
/// project onto the Laguerre basis, refine, and force non-negativity by a
/// penalty continuation or a first-order compensator. Returns a validated ME
/// model at the requested order.
inline PhaseModel fit_pipeline(const AnalyticLaw& target, int order,
                               const PipelineOptions& options, PipelineReport* report) {
  if (order < 1) throw std::invalid_argument("fit_pipeline: order >= 1");
  PipelineReport local;
  PipelineReport& rep = report ? *report : local;
  rep = PipelineReport{};

  const double mean = target.mean();
  // grid: cover past the 2% settling time and hold > 99.9% of the mass
  double horizon = options.horizon;
  if (horizon <= 0.0) horizon = std::max(target.quantile(0.9999), 3.0 * mean);
  double step = options.step;
  if (step <= 0.0) step = horizon / 8000.0;
  PdfSamples samples = PdfSamples::from_law(target, horizon, step);
  if (!std::isfinite(samples.values[0])) samples.values[0] = samples.values[1];
  const PdfSamples target_samples = samples;

  if (target.is_exponential()) {
    // order-1 projection is exact; higher orders inherit it
    Matrix pi = -(1.0 / mean) * Matrix::Identity(1, 1);
    rep.fit_percent_pdf = 100.0;
    rep.fit_percent_cdf = 100.0;
    rep.notes = "exponential target: exact one-phase model";
    return PhaseModel(pi, PhaseKind::PH);
  }

  double beta = options.beta.value_or(3.0 / mean);
  beta = std::clamp(beta, 0.1 / mean, 10.0 / mean);

  std::vector<double> tpen = samples.times();  // extended tail guard
  const double tail_end = std::max(3.0 * horizon, 10.0 * mean);
  for (double t = horizon + step * 50; t <= tail_end; t += step * 50) tpen.push_back(t);

  auto finish = [&](const RationalModel& mdl) {
    PdfSamples est;
    est.step = target_samples.step;
    est.values = mdl.impulse_response(target_samples.times());
    rep.fit_percent_pdf = fit_percent(target_samples, est);
    PdfSamples cdf_a = target_samples, cdf_e = est;
    double accA = 0.0, accE = 0.0;
    for (size_t i = 0; i < est.values.size(); ++i) {
      accA += target_samples.values[i] * step;
      accE += est.values[i] * step;
      cdf_a.values[i] = accA;
      cdf_e.values[i] = accE;
    }
    rep.fit_percent_cdf = fit_percent(cdf_a, cdf_e);
    rep.min_pdf = detail::min_impulse(mdl, tpen);
    return to_me_realization(mdl.normalized_dc());
  };

  // A candidate is any grid-non-negative model produced below; the best one by
  // pdf accuracy against the raw target wins.
  struct Candidate {
    RationalModel mdl;
    double fit_pdf;
    bool penalty, comp;
    CompensatorReport crep;
    std::optional<RationalModel> base;  // pre-compensation model, if any
  };
  auto score = [&](const RationalModel& mdl) {
    PdfSamples est;
    est.step = target_samples.step;
    est.values = mdl.impulse_response(target_samples.times());
    return fit_percent(target_samples, est);
  };

  // One attempt = projection + refinement at the requested order; if negative,
  // a hinge-penalty continuation, a one-order-lower base widened by the
  // compensator ladder, and a near-unity compensator on the best near-feasible
  // continuation iterate (order grows by one, as compensation always does).
  auto attempt = [&](const PdfSamples& fit_samples) {
    std::vector<Candidate> cands;
    auto push = [&](const RationalModel& mdl, bool penalty, bool comp,
                    const CompensatorReport& crep = {},
                    const std::optional<RationalModel>& base = std::nullopt) {
      if (detail::min_impulse(mdl, tpen) >= -1e-9)
        cands.push_back({mdl, score(mdl), penalty, comp, crep, base});
    };

    RationalModel mdl = laguerre_fit(fit_samples, order - 1, beta).model;
    if (options.polish) {
      mdl = detail::polish_rational(mdl, fit_samples).normalized_dc();
      rep.polished = true;
    }
    push(mdl, false, false);
    if (!cands.empty()) return cands;  // unconstrained optimum is non-negative

    RationalModel rescue_base = mdl;  // best near-feasible iterate seen so far
    double rescue_fit = -std::numeric_limits<double>::infinity();
    if (detail::min_impulse(mdl, tpen) >= -1e-5) rescue_fit = score(mdl);
    if (options.polish) {
      RationalModel pen = mdl;
      for (const auto& [w, margin] : std::vector<std::pair<double, double>>{
               {10.0, 0.0}, {30.0, 0.0}, {100.0, 0.0}, {300.0, 0.0}, {1000.0, 0.0},
               {3000.0, 0.0}, {3000.0, 1e-8}, {6000.0, 3e-8}, {12000.0, 1e-7},
               {24000.0, 3e-7}}) {
        pen = detail::polish_rational(pen, fit_samples, w, margin, &tpen).normalized_dc();
        if (detail::min_impulse(pen, tpen) >= -1e-9) {
          push(pen, true, false);
          break;
        }
        if (detail::min_impulse(pen, tpen) >= -1e-5) {
          const double f = score(pen);
          if (f > rescue_fit) {
            rescue_fit = f;
            rescue_base = pen;
          }
        }
      }
    }

    if (order >= 2) {
      RationalModel base = laguerre_fit(fit_samples, order - 2, beta).model;
      if (options.polish) base = detail::polish_rational(base, fit_samples).normalized_dc();
      const double alpha0 = base.dominant_decay_rate();
      bool found = false;
      for (double zf : options.ladder_z0_factors) {
        for (double pf : options.ladder_p0_fractions) {
          const double p0 = pf * alpha0;
          CompensatorReport crep;
          RationalModel cand = compensate(base, zf * p0, p0, &crep, &tpen);
          if (crep.min_impulse >= -1e-9) {
            push(cand, false, true, crep, base);
            found = true;
            break;
          }
        }
        if (found) break;
      }
    }

    if (std::isfinite(rescue_fit)) {
      const double alpha0 = rescue_base.dominant_decay_rate();
      bool found = false;
      for (double zf : {1.001, 1.002, 1.005, 1.01, 1.02, 1.05}) {
        for (double pf : {0.9, 0.7, 0.5, 0.3, 0.1}) {
          const double p0 = pf * alpha0;
          CompensatorReport crep;
          RationalModel cand = compensate(rescue_base, zf * p0, p0, &crep, &tpen);
          if (crep.min_impulse >= -1e-9) {
            push(cand, true, true, crep, rescue_base);
            found = true;
            break;
          }
        }
        if (found) break;
      }
    }
    return cands;
  };

  auto deliver = [&](const std::vector<Candidate>& cands) {
    const Candidate* best = &cands.front();
    for (const auto& c : cands)
      if (c.fit_pdf > best->fit_pdf) best = &c;
    rep.penalty_stage = best->penalty;
    rep.compensated = best->comp;
    rep.compensator = best->crep;
    rep.pre_compensation = best->base;
    return finish(best->mdl);
  };

  if (auto cands = attempt(samples); !cands.empty()) return deliver(cands);

  // Last resort: pull the transient up before refitting. The bump scales with
  // the density peak so the pulled target is safely bounded away from zero.
  if (options.allow_pull_up) {
    double peak = 0.0, t_peak = 0.0;
    for (size_t i = 0; i < samples.values.size(); ++i)
      if (samples.values[i] > peak) {
        peak = samples.values[i];
        t_peak = samples.time_at(i);
      }
    const BumpSpec bump =
        options.bump.value_or(BumpSpec{20.0 * peak, 0.45 * std::max(t_peak, step), 0.0});
    rep.penalty_stage = rep.compensated = false;
    PdfSamples pulled = pull_up(samples, bump, &rep.pull_up);
    if (auto cands = attempt(pulled); !cands.empty()) {
      rep.pulled_up = true;
      return deliver(cands);
    }
  }
  throw PipelineFailure("fit_pipeline: no non-negative model at this order; raise the order");
}

}  // namespace smjls
