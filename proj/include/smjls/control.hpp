#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include "smjls/markovianize.hpp"
#include "smjls/quadrature.hpp"

namespace smjls {

struct TimeGrid {
  double t_f = 0.0;
  int steps = 0;
  double h = 0.0;

  TimeGrid(double tf, int n) : t_f(tf), steps(n), h(tf / n) {
    if (tf <= 0.0 || n < 100) throw std::invalid_argument("TimeGrid: t_f > 0, steps >= 100");
  }

  double t(int j) const { return h * j; }

  /// Step count scaled to the fastest chain rate so stiff blocks stay resolved.
  static TimeGrid suggest(const ClusteredChain& chain) {
    double rate = 0.0;
    const Eigen::VectorXcd eigs = chain.pi_bar.eigenvalues();
    for (Eigen::Index i = 0; i < eigs.size(); ++i)
      rate = std::max(rate, std::abs(eigs(i).real()));
    const int n = std::max(3000, static_cast<int>(std::ceil(100.0 * chain.t_f * rate)));
    return TimeGrid(chain.t_f, n);
  }
};

/// Per-cluster gains on the grid nodes, linearly interpolated between nodes.
struct GainSchedule {
  TimeGrid grid;
  std::vector<std::vector<Matrix>> gamma;  // [cluster][node 0..steps]

  GainSchedule(const TimeGrid& g, int clusters) : grid(g) {
    gamma.resize(static_cast<size_t>(clusters));
  }

  static GainSchedule constant(const TimeGrid& g, const std::vector<Matrix>& per_cluster) {
    GainSchedule s(g, static_cast<int>(per_cluster.size()));
    for (size_t k = 0; k < per_cluster.size(); ++k)
      s.gamma[k].assign(static_cast<size_t>(g.steps) + 1, per_cluster[k]);
    return s;
  }

  Matrix eval(int cluster, double t) const {
    const auto& seq = gamma[static_cast<size_t>(cluster)];
    const double s = std::clamp(t / grid.h, 0.0, static_cast<double>(grid.steps));
    const int j = std::min(static_cast<int>(s), grid.steps - 1);
    const double w = s - j;
    if (w == 0.0) return seq[static_cast<size_t>(j)];
    return (1.0 - w) * seq[static_cast<size_t>(j)] + w * seq[static_cast<size_t>(j) + 1];
  }

  double max_diff(const GainSchedule& other) const {
    double d = 0.0;
    for (size_t k = 0; k < gamma.size(); ++k)
      for (size_t j = 0; j < gamma[k].size(); ++j)
        d = std::max(d, (gamma[k][j] - other.gamma[k][j]).lpNorm<Eigen::Infinity>());
    return d;
  }
};

/// Phase probabilities mu(t) = mu(0) exp(Pi_bar t) at grid nodes and midpoints.
struct MuPath {
  std::vector<Eigen::RowVectorXd> node;  // 0..steps
  std::vector<Eigen::RowVectorXd> half;  // 0..steps-1, at t_j + h/2

  double cluster_sum(const ClusteredChain& chain, int j, int cluster) const {
    double s = 0.0;
    for (int i : chain.cluster_phases(cluster)) s += node[static_cast<size_t>(j)](i);
    return s;
  }
};

inline MuPath propagate_mu(const ClusteredChain& chain, const TimeGrid& grid) {
  MuPath mu;
  const Matrix step = (chain.pi_bar * grid.h).exp();
  const Matrix half = (chain.pi_bar * (grid.h / 2.0)).exp();
  mu.node.reserve(static_cast<size_t>(grid.steps) + 1);
  mu.half.reserve(static_cast<size_t>(grid.steps));
  Eigen::RowVectorXd row = chain.mu0;
  for (int j = 0; j <= grid.steps; ++j) {
    mu.node.push_back(row);
    if (j < grid.steps) {
      mu.half.push_back(row * half);
      row *= step;
    }
  }
  for (int j = 0; j <= grid.steps; ++j) {
    if (std::abs(mu.node[static_cast<size_t>(j)].sum() - 1.0) > 1e-8)
      throw std::runtime_error("propagate_mu: probability mass drift at node " +
                               std::to_string(j));
    for (int k = 0; k < chain.cluster_count(); ++k) {
      double s = 0.0;
      for (int i : chain.cluster_phases(k)) s += mu.node[static_cast<size_t>(j)](i);
      if (s < -1e-6)
        throw std::runtime_error("propagate_mu: cluster occupancy " + std::to_string(s) +
                                 " — the holding-time approximation is too poor");
    }
  }
  return mu;
}

/// Per-phase symmetric matrix sequences indexed [node][phase].
using MatrixSet = std::vector<Matrix>;

struct CostateSet {
  TimeGrid grid;
  std::vector<MatrixSet> values;  // Lambda_i(t_j)
};
struct CovarianceSet {
  TimeGrid grid;
  std::vector<MatrixSet> values;  // X_i(t_j)
};

namespace detail {

inline void symmetrize(MatrixSet& set) {
  for (Matrix& m : set) m = 0.5 * (m + m.transpose()).eval();
}

inline void check_finite(const MatrixSet& set, double t, const char* who) {
  for (const Matrix& m : set)
    if (!m.allFinite())
      throw std::runtime_error(std::string(who) + ": non-finite values at t = " +
                               std::to_string(t));
}

/// -dLambda/dt for every phase.
inline MatrixSet costate_rhs(const ClusteredChain& chain, double t, const MatrixSet& lam,
                             const GainSchedule& gains) {
  const auto nv = static_cast<size_t>(chain.phase_count());
  MatrixSet d(nv);
  for (size_t i = 0; i < nv; ++i) {
    const auto& dyn = chain.phase_dyn[i];
    const Matrix g = gains.eval(chain.cluster_of[i], t);
    const Matrix abar = dyn.A + dyn.B * g;
    Matrix v = abar.transpose() * lam[i] + lam[i] * abar + dyn.Q + g.transpose() * dyn.R * g;
    for (size_t j = 0; j < nv; ++j)
      v += chain.pi_bar(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * lam[j];
    d[i] = std::move(v);
  }
  return d;
}

/// dX/dt for every phase (note the transposed coupling).
inline MatrixSet covariance_rhs(const ClusteredChain& chain, double t, const MatrixSet& x,
                                const GainSchedule& gains) {
  const auto nv = static_cast<size_t>(chain.phase_count());
  MatrixSet d(nv);
  for (size_t i = 0; i < nv; ++i) {
    const auto& dyn = chain.phase_dyn[i];
    const Matrix g = gains.eval(chain.cluster_of[i], t);
    const Matrix abar = dyn.A + dyn.B * g;
    Matrix v = abar * x[i] + x[i] * abar.transpose();
    for (size_t j = 0; j < nv; ++j)
      v += chain.pi_bar(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) * x[j];
    d[i] = std::move(v);
  }
  return d;
}

inline MatrixSet axpy(const MatrixSet& y, double a, const MatrixSet& k) {
  MatrixSet out(y.size());
  for (size_t i = 0; i < y.size(); ++i) out[i] = y[i] + a * k[i];
  return out;
}

inline MatrixSet rk4_combine(const MatrixSet& y, double h, const MatrixSet& k1,
                             const MatrixSet& k2, const MatrixSet& k3, const MatrixSet& k4) {
  MatrixSet out(y.size());
  for (size_t i = 0; i < y.size(); ++i)
    out[i] = y[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

}  // namespace detail

/// Backward integration of the coupled co-state equations from Lambda_i(t_f) = S_i.
inline CostateSet solve_costate(const ClusteredChain& chain, const GainSchedule& gains,
                                const TimeGrid& grid) {
  const auto nv = static_cast<size_t>(chain.phase_count());
  CostateSet out{grid, std::vector<MatrixSet>(static_cast<size_t>(grid.steps) + 1)};
  MatrixSet lam(nv);
  for (size_t i = 0; i < nv; ++i) lam[i] = chain.phase_dyn[i].S;
  out.values[static_cast<size_t>(grid.steps)] = lam;
  const double h = grid.h;
  for (int j = grid.steps; j > 0; --j) {
    const double t = grid.t(j);
    const auto k1 = detail::costate_rhs(chain, t, lam, gains);
    const auto k2 = detail::costate_rhs(chain, t - h / 2, detail::axpy(lam, h / 2, k1), gains);
    const auto k3 = detail::costate_rhs(chain, t - h / 2, detail::axpy(lam, h / 2, k2), gains);
    const auto k4 = detail::costate_rhs(chain, t - h, detail::axpy(lam, h, k3), gains);
    lam = detail::rk4_combine(lam, h, k1, k2, k3, k4);
    detail::symmetrize(lam);
    detail::check_finite(lam, t - h, "solve_costate");
    out.values[static_cast<size_t>(j - 1)] = lam;
  }
  return out;
}

/// Forward integration of the coupled covariance equations from
/// X_i(0) = x0 x0' mu_i(0).
inline CovarianceSet solve_covariance(const ClusteredChain& chain, const GainSchedule& gains,
                                      const TimeGrid& grid) {
  const auto nv = static_cast<size_t>(chain.phase_count());
  CovarianceSet out{grid, std::vector<MatrixSet>(static_cast<size_t>(grid.steps) + 1)};
  MatrixSet x(nv);
  for (size_t i = 0; i < nv; ++i)
    x[i] = chain.x0 * chain.x0.transpose() * chain.mu0(static_cast<Eigen::Index>(i));
  out.values[0] = x;
  const double h = grid.h;
  for (int j = 0; j < grid.steps; ++j) {
    const double t = grid.t(j);
    const auto k1 = detail::covariance_rhs(chain, t, x, gains);
    const auto k2 = detail::covariance_rhs(chain, t + h / 2, detail::axpy(x, h / 2, k1), gains);
    const auto k3 = detail::covariance_rhs(chain, t + h / 2, detail::axpy(x, h / 2, k2), gains);
    const auto k4 = detail::covariance_rhs(chain, t + h, detail::axpy(x, h, k3), gains);
    x = detail::rk4_combine(x, h, k1, k2, k3, k4);
    detail::symmetrize(x);
    detail::check_finite(x, t + h, "solve_covariance");
    out.values[static_cast<size_t>(j + 1)] = x;
  }
  return out;
}

struct OptimalSolution {
  GainSchedule gains;
  CostateSet costates;
  std::vector<bool> inert_cluster;  // never occupied above the guard threshold
};

namespace detail {

/// Closed-form clustered gain from the occupancy-weighted co-state mixture;
/// falls back to the held (later-time) gain when the cluster is unoccupied.
inline Matrix clustered_gain(const ClusteredChain& chain, int cluster,
                             const Eigen::RowVectorXd& mu, const MatrixSet& lam,
                             const Matrix& held) {
  const auto phases = chain.cluster_phases(cluster);
  double occ = 0.0;
  for (int i : phases) occ += mu(i);
  if (occ < 1e-12) return held;
  const auto& dyn = chain.cluster_dynamics(cluster);
  Matrix mix = Matrix::Zero(dyn.A.rows(), dyn.A.cols());
  for (int i : phases) mix += (mu(i) / occ) * lam[static_cast<size_t>(i)];
  return -dyn.R.llt().solve(dyn.B.transpose() * mix);
}

}  // namespace detail

/// Theorem-2 synthesis: simultaneous backward sweep forming the clustered gain
/// from the current co-state mixture at every integration stage.
inline OptimalSolution optimal_gains(const ClusteredChain& chain, const TimeGrid& grid) {
  const int nc = chain.cluster_count();
  for (int k = 0; k < nc; ++k)
    if (!chain.homogeneous(k))
      throw std::invalid_argument(
          "optimal_gains: cluster " + std::to_string(k) +
          " has heterogeneous dynamics; use mjlspom_gains_iterative");
  const MuPath mu = propagate_mu(chain, grid);
  const auto nv = static_cast<size_t>(chain.phase_count());
  const double h = grid.h;

  OptimalSolution sol{GainSchedule(grid, nc),
                      CostateSet{grid, std::vector<MatrixSet>(static_cast<size_t>(grid.steps) + 1)},
                      std::vector<bool>(static_cast<size_t>(nc), true)};
  for (int k = 0; k < nc; ++k)
    sol.gains.gamma[static_cast<size_t>(k)].resize(static_cast<size_t>(grid.steps) + 1);

  MatrixSet lam(nv);
  for (size_t i = 0; i < nv; ++i) lam[i] = chain.phase_dyn[i].S;
  sol.costates.values[static_cast<size_t>(grid.steps)] = lam;

  std::vector<Matrix> held(static_cast<size_t>(nc));
  auto gains_at = [&](const Eigen::RowVectorXd& m, const MatrixSet& l) {
    std::vector<Matrix> g(static_cast<size_t>(nc));
    for (int k = 0; k < nc; ++k) {
      const auto& dyn = chain.cluster_dynamics(k);
      if (held[static_cast<size_t>(k)].size() == 0)
        held[static_cast<size_t>(k)] = Matrix::Zero(dyn.B.cols(), dyn.A.rows());
      g[static_cast<size_t>(k)] =
          detail::clustered_gain(chain, k, m, l, held[static_cast<size_t>(k)]);
      held[static_cast<size_t>(k)] = g[static_cast<size_t>(k)];
    }
    return g;
  };
  auto rhs = [&](const Eigen::RowVectorXd& m, const MatrixSet& l) {
    const auto g = gains_at(m, l);
    MatrixSet d(nv);
    for (size_t i = 0; i < nv; ++i) {
      const auto& dyn = chain.phase_dyn[i];
      const Matrix& gi = g[static_cast<size_t>(chain.cluster_of[i])];
      const Matrix abar = dyn.A + dyn.B * gi;
      Matrix v = abar.transpose() * l[i] + l[i] * abar + dyn.Q + gi.transpose() * dyn.R * gi;
      for (size_t jj = 0; jj < nv; ++jj)
        v += chain.pi_bar(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(jj)) * l[jj];
      d[i] = std::move(v);
    }
    return d;
  };

  for (int j = grid.steps; j >= 0; --j) {
    const auto& mj = mu.node[static_cast<size_t>(j)];
    const auto g = gains_at(mj, lam);
    for (int k = 0; k < nc; ++k) {
      sol.gains.gamma[static_cast<size_t>(k)][static_cast<size_t>(j)] =
          g[static_cast<size_t>(k)];
      double occ = 0.0;
      for (int i : chain.cluster_phases(k)) occ += mj(i);
      if (occ >= 1e-12) sol.inert_cluster[static_cast<size_t>(k)] = false;
    }
    if (j == 0) break;
    const auto& mh = mu.half[static_cast<size_t>(j - 1)];
    const auto& mp = mu.node[static_cast<size_t>(j - 1)];
    const auto k1 = rhs(mj, lam);
    const auto k2 = rhs(mh, detail::axpy(lam, h / 2, k1));
    const auto k3 = rhs(mh, detail::axpy(lam, h / 2, k2));
    const auto k4 = rhs(mp, detail::axpy(lam, h, k3));
    lam = detail::rk4_combine(lam, h, k1, k2, k3, k4);
    detail::symmetrize(lam);
    detail::check_finite(lam, grid.t(j - 1), "optimal_gains");
    sol.costates.values[static_cast<size_t>(j - 1)] = lam;
  }
  return sol;
}

struct CostReport {
  double J = 0.0;           // x0' (sum mu_i(0) Lambda_i(0)) x0
  double J_trace = 0.0;     // sum tr[Lambda_i(0) X_i(0)]
  double J_integral = 0.0;  // int sum tr[L_i X_i] dt + sum tr[S_i X_i(t_f)]
  double max_mismatch = 0.0;
  MatrixSet lambda0;
  bool forms_agree = false;  // within 0.1%
};

inline CostReport evaluate_cost(const ClusteredChain& chain, const GainSchedule& gains,
                                const TimeGrid& grid) {
  const CostateSet lam = solve_costate(chain, gains, grid);
  const CovarianceSet cov = solve_covariance(chain, gains, grid);
  const auto nv = static_cast<size_t>(chain.phase_count());

  CostReport rep;
  rep.lambda0 = lam.values[0];
  Matrix mix = Matrix::Zero(chain.x0.size(), chain.x0.size());
  for (size_t i = 0; i < nv; ++i)
    rep.J_trace += (lam.values[0][i] * cov.values[0][i]).trace();
  for (size_t i = 0; i < nv; ++i)
    mix += chain.mu0(static_cast<Eigen::Index>(i)) * lam.values[0][i];
  rep.J = chain.x0.dot(mix * chain.x0);

  std::vector<double> integrand(static_cast<size_t>(grid.steps) + 1, 0.0);
  for (int j = 0; j <= grid.steps; ++j) {
    double v = 0.0;
    for (size_t i = 0; i < nv; ++i) {
      const auto& dyn = chain.phase_dyn[i];
      const Matrix g = gains.eval(chain.cluster_of[i], grid.t(j));
      const Matrix L = dyn.Q + g.transpose() * dyn.R * g;
      v += (L * cov.values[static_cast<size_t>(j)][i]).trace();
    }
    integrand[static_cast<size_t>(j)] = v;
  }
  rep.J_integral = trapezoid(integrand, grid.h);
  for (size_t i = 0; i < nv; ++i)
    rep.J_integral +=
        (chain.phase_dyn[i].S * cov.values[static_cast<size_t>(grid.steps)][i]).trace();

  const double scale = std::max({std::abs(rep.J), std::abs(rep.J_trace), 1e-30});
  rep.max_mismatch = std::max(std::abs(rep.J - rep.J_trace),
                              std::abs(rep.J - rep.J_integral)) /
                     scale;
  rep.forms_agree = rep.max_mismatch <= 1e-3;
  if (rep.max_mismatch > 1e-2)
    throw std::runtime_error("evaluate_cost: cost forms disagree by " +
                             std::to_string(100.0 * rep.max_mismatch) +
                             "% — refine the grid");
  return rep;
}

struct IterationResult {
  GainSchedule gains;
  std::vector<double> residual_history;
  std::vector<double> cost_history;
  bool converged = false;
};

namespace detail {

/// Max over nodes/clusters of the stationarity defect
/// || sum_i (R_i Gamma_k + B_i' Lambda_i) X_i ||_inf.
inline double stationarity_residual(const ClusteredChain& chain, const GainSchedule& gains,
                                    const CostateSet& lam, const CovarianceSet& cov) {
  double res = 0.0;
  for (int j = 0; j <= gains.grid.steps; ++j) {
    for (int k = 0; k < chain.cluster_count(); ++k) {
      const Matrix& g = gains.gamma[static_cast<size_t>(k)][static_cast<size_t>(j)];
      Matrix acc;
      bool first = true;
      for (int i : chain.cluster_phases(k)) {
        const auto& dyn = chain.phase_dyn[static_cast<size_t>(i)];
        const Matrix term =
            (dyn.R * g + dyn.B.transpose() * lam.values[static_cast<size_t>(j)][static_cast<size_t>(i)]) *
            cov.values[static_cast<size_t>(j)][static_cast<size_t>(i)];
        if (first) {
          acc = term;
          first = false;
        } else {
          acc += term;
        }
      }
      res = std::max(res, acc.lpNorm<Eigen::Infinity>());
    }
  }
  return res;
}

/// Per-node linear solve of the stationarity condition for Gamma_k by
/// vectorization, ridge-regularized where the covariance mixture is singular.
inline GainSchedule stationarity_gains(const ClusteredChain& chain, const GainSchedule& prev,
                                       const CostateSet& lam, const CovarianceSet& cov) {
  GainSchedule out = prev;
  for (int k = 0; k < chain.cluster_count(); ++k) {
    const auto phases = chain.cluster_phases(k);
    const auto& d0 = chain.phase_dyn[static_cast<size_t>(phases.front())];
    const Eigen::Index nu = d0.B.cols(), nx = d0.A.rows();
    for (int j = 0; j <= prev.grid.steps; ++j) {
      Matrix lhs = Matrix::Zero(nu * nx, nu * nx);
      Vector rhs = Vector::Zero(nu * nx);
      for (int i : phases) {
        const auto& dyn = chain.phase_dyn[static_cast<size_t>(i)];
        const Matrix& X = cov.values[static_cast<size_t>(j)][static_cast<size_t>(i)];
        const Matrix& L = lam.values[static_cast<size_t>(j)][static_cast<size_t>(i)];
        lhs += Eigen::kroneckerProduct(X.transpose(), dyn.R);
        const Matrix b = dyn.B.transpose() * L * X;
        rhs -= Eigen::Map<const Vector>(b.data(), b.size());
      }
      lhs.diagonal().array() += 1e-10 * std::max(1.0, lhs.cwiseAbs().maxCoeff());
      const Vector v = lhs.ldlt().solve(rhs);
      out.gamma[static_cast<size_t>(k)][static_cast<size_t>(j)] =
          Eigen::Map<const Matrix>(v.data(), nu, nx);
    }
  }
  return out;
}

inline GainSchedule blend(const GainSchedule& a, const GainSchedule& b, double theta) {
  GainSchedule out = a;
  for (size_t k = 0; k < out.gamma.size(); ++k)
    for (size_t j = 0; j < out.gamma[k].size(); ++j)
      out.gamma[k][j] = (1.0 - theta) * a.gamma[k][j] + theta * b.gamma[k][j];
  return out;
}

}  // namespace detail

/// Block-coordinate solution of the general clustered stationarity system for
/// chains whose clusters may mix dynamics. Homogeneous chains shortcut to the
/// closed-form synthesis (their stationarity system solves exactly).
inline IterationResult mjlspom_gains_iterative(
    const ClusteredChain& chain, const TimeGrid& grid, int max_iters = 50, double tol = 1e-8,
    const std::optional<GainSchedule>& initial = std::nullopt) {
  bool homogeneous = true;
  for (int k = 0; k < chain.cluster_count(); ++k) homogeneous &= chain.homogeneous(k);

  GainSchedule gains = [&] {
    if (initial) return *initial;
    if (homogeneous) return optimal_gains(chain, grid).gains;
    // occupancy-weighted average dynamics per cluster, solved in closed form
    ClusteredChain avg = chain;
    for (int k = 0; k < chain.cluster_count(); ++k) {
      const auto phases = chain.cluster_phases(k);
      double mass = 0.0;
      for (int i : phases) mass += chain.mu0(i);
      ModeDynamics d = chain.phase_dyn[static_cast<size_t>(phases.front())];
      d.A.setZero(); d.B.setZero(); d.Q.setZero(); d.R.setZero(); d.S.setZero();
      for (int i : phases) {
        const double w = mass > 1e-12 ? chain.mu0(i) / mass
                                      : 1.0 / static_cast<double>(phases.size());
        const auto& di = chain.phase_dyn[static_cast<size_t>(i)];
        d.A += w * di.A; d.B += w * di.B; d.Q += w * di.Q; d.R += w * di.R; d.S += w * di.S;
      }
      for (int i : phases) avg.phase_dyn[static_cast<size_t>(i)] = d;
    }
    return optimal_gains(avg, grid).gains;
  }();

  IterationResult result{gains, {}, {}, false};
  CostateSet lam = solve_costate(chain, gains, grid);
  CovarianceSet cov = solve_covariance(chain, gains, grid);
  double cost = evaluate_cost(chain, gains, grid).J;
  double residual = detail::stationarity_residual(chain, gains, lam, cov);
  result.cost_history.push_back(cost);
  result.residual_history.push_back(residual);
  result.gains = gains;
  if (residual < tol) {
    result.converged = true;
    return result;
  }

  for (int it = 0; it < max_iters; ++it) {
    const GainSchedule candidate = detail::stationarity_gains(chain, gains, lam, cov);
    double theta = 1.0;
    bool accepted = false;
    for (int half = 0; half < 12; ++half) {
      const GainSchedule trial = detail::blend(gains, candidate, theta);
      try {
        const CostateSet lam_t = solve_costate(chain, trial, grid);
        const CovarianceSet cov_t = solve_covariance(chain, trial, grid);
        const double cost_t = evaluate_cost(chain, trial, grid).J;
        if (cost_t <= cost * (1.0 + 1e-12)) {
          gains = trial;
          lam = lam_t;
          cov = cov_t;
          cost = cost_t;
          accepted = true;
          break;
        }
      } catch (const std::runtime_error&) {
        // trial not integrable on this grid; shorten the step
      }
      theta /= 2.0;
    }
    residual = detail::stationarity_residual(chain, gains, lam, cov);
    result.cost_history.push_back(cost);
    result.residual_history.push_back(residual);
    result.gains = gains;
    if (residual < tol) {
      result.converged = true;
      return result;
    }
    if (!accepted) return result;  // no descent direction left
  }
  return result;
}

/// Two-cluster convolution-form co-states at the cluster entry phases, solved
/// as a coupled Volterra system by fixed-point sweeps. Independent of the ODE
/// path; used as a cross-method oracle.
struct ConvolutionCostates {
  std::vector<Matrix> lambda_first;   // entry phase of cluster 0, per node
  std::vector<Matrix> lambda_second;  // entry phase of cluster 1, per node
};

inline ConvolutionCostates costate_convolution_oracle(const ClusteredChain& chain,
                                                      const GainSchedule& gains,
                                                      const TimeGrid& grid) {
  if (chain.cluster_count() != 2 || chain.blocks.size() != 2)
    throw std::invalid_argument("costate_convolution_oracle: need exactly two single-block clusters");
  const int N = grid.steps;
  const double h = grid.h;
  // Gregory end-corrected trapezoid weights (third order) over M intervals
  auto quad_w = [](int idx, int M) {
    if (M < 3) return (idx == 0 || idx == M) ? 0.5 : 1.0;
    if (idx == 0 || idx == M) return 5.0 / 12.0;
    if (idx == 1 || idx == M - 1) return 13.0 / 12.0;
    return 1.0;
  };

  struct Side {
    std::vector<double> pdf, ccdf;                 // kernels on offsets 0..N
    std::vector<std::vector<Matrix>> phi;          // phi[l][j-l] = Phi(t_j, t_l)
    std::vector<Matrix> fixed;                     // terminal + running-cost part
    const ModeDynamics* dyn = nullptr;
  };
  std::array<Side, 2> sides;
  for (int k = 0; k < 2; ++k) {
    const auto& blk = chain.blocks[static_cast<size_t>(k)];
    const Matrix pi = chain.pi_bar.block(blk.offset, blk.offset, blk.size, blk.size);
    const PhaseModel model(pi, PhaseKind::ME);
    Side& s = sides[static_cast<size_t>(k)];
    s.dyn = &chain.cluster_dynamics(blk.mode);
    s.pdf.resize(static_cast<size_t>(N) + 1);
    s.ccdf.resize(static_cast<size_t>(N) + 1);
    const Matrix step = (pi * h).exp();
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Unit(blk.size, 0);
    for (int j = 0; j <= N; ++j) {
      s.pdf[static_cast<size_t>(j)] = row.dot(model.exit_vector());
      s.ccdf[static_cast<size_t>(j)] = row.sum();
      row *= step;
    }
    // one-step closed-loop transition matrices, then all pairwise products
    const Eigen::Index nx = s.dyn->A.rows();
    std::vector<Matrix> one_step(static_cast<size_t>(N));
    for (int j = 0; j < N; ++j) {
      Matrix phi = Matrix::Identity(nx, nx);
      auto f = [&](double t, const Matrix& p) {
        return ((s.dyn->A + s.dyn->B * gains.eval(blk.mode, t)) * p).eval();
      };
      const double t0 = grid.t(j);
      const Matrix k1 = f(t0, phi);
      const Matrix k2 = f(t0 + h / 2, phi + (h / 2) * k1);
      const Matrix k3 = f(t0 + h / 2, phi + (h / 2) * k2);
      const Matrix k4 = f(t0 + h, phi + h * k3);
      one_step[static_cast<size_t>(j)] = phi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    s.phi.resize(static_cast<size_t>(N) + 1);
    for (int l = 0; l <= N; ++l) {
      auto& row_phi = s.phi[static_cast<size_t>(l)];
      row_phi.resize(static_cast<size_t>(N - l) + 1);
      row_phi[0] = Matrix::Identity(nx, nx);
      for (int j = l; j < N; ++j)
        row_phi[static_cast<size_t>(j - l + 1)] =
            one_step[static_cast<size_t>(j)] * row_phi[static_cast<size_t>(j - l)];
    }
    // gain-dependent but coupling-independent part
    s.fixed.resize(static_cast<size_t>(N) + 1);
    for (int l = 0; l <= N; ++l) {
      const Matrix& phiT = s.phi[static_cast<size_t>(l)][static_cast<size_t>(N - l)];
      Matrix acc = s.ccdf[static_cast<size_t>(N - l)] * phiT.transpose() * s.dyn->S * phiT;
      for (int j = l; j <= N && l < N; ++j) {
        const double w = quad_w(j - l, N - l);
        const Matrix g = gains.eval(blk.mode, grid.t(j));
        const Matrix L = s.dyn->Q + g.transpose() * s.dyn->R * g;
        const Matrix& p = s.phi[static_cast<size_t>(l)][static_cast<size_t>(j - l)];
        acc += w * h * s.ccdf[static_cast<size_t>(j - l)] * p.transpose() * L * p;
      }
      s.fixed[static_cast<size_t>(l)] = acc;
    }
  }

  const Eigen::Index nx = sides[0].dyn->A.rows();
  ConvolutionCostates out;
  out.lambda_first.assign(static_cast<size_t>(N) + 1, Matrix::Zero(nx, nx));
  out.lambda_second.assign(static_cast<size_t>(N) + 1, Matrix::Zero(nx, nx));
  auto sweep = [&](const Side& s, const std::vector<Matrix>& other, std::vector<Matrix>& mine) {
    double delta = 0.0;
    for (int l = N; l >= 0; --l) {
      Matrix acc = s.fixed[static_cast<size_t>(l)];
      for (int j = l; j <= N && l < N; ++j) {
        const double w = quad_w(j - l, N - l);
        const Matrix& p = s.phi[static_cast<size_t>(l)][static_cast<size_t>(j - l)];
        acc += w * h * s.pdf[static_cast<size_t>(j - l)] * p.transpose() *
               other[static_cast<size_t>(j)] * p;
      }
      delta = std::max(delta, (acc - mine[static_cast<size_t>(l)]).lpNorm<Eigen::Infinity>());
      mine[static_cast<size_t>(l)] = acc;
    }
    return delta;
  };
  for (int sweeps = 0; sweeps < 100; ++sweeps) {
    const double d1 = sweep(sides[0], out.lambda_second, out.lambda_first);
    const double d2 = sweep(sides[1], out.lambda_first, out.lambda_second);
    double scale = 1e-30;
    for (const auto& m : out.lambda_first) scale = std::max(scale, m.lpNorm<Eigen::Infinity>());
    if (std::max(d1, d2) < 1e-12 * scale) return out;
  }
  throw std::runtime_error("costate_convolution_oracle: fixed point did not converge");
}

}  // namespace smjls
