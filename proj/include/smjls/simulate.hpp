#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "smjls/control.hpp"
#include "smjls/semi_markov.hpp"

namespace smjls {

/// One semi-Markov sample path: mode entries up to the horizon.
struct PathRecord {
  std::vector<std::pair<int, double>> visits;  // (mode, entry time)
  double t_f = 0.0;
};

namespace detail {

inline double draw_holding(const EdgeSpec& e, RngStream& rng) {
  if (e.law) return e.law->sample(rng);
  if (e.model) return e.model->sample(rng);  // throws for ME kind
  throw std::runtime_error("sample_path: edge has no samplable law");
}

inline int draw_categorical(const Vector& p, RngStream& rng) {
  double u = rng.uniform();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (u < p(i)) return static_cast<int>(i);
    u -= p(i);
  }
  return static_cast<int>(p.size() - 1);
}

}  // namespace detail

/// Draw a path from the original semi-Markov law (not the approximation):
/// racing modes take the minimum of the conditional draws; given-probability
/// modes draw the successor first, then its conditional holding time.
inline PathRecord sample_path(const SemiMarkovSpec& spec, RngStream& rng) {
  PathRecord path;
  path.t_f = spec.t_f;
  int mode = detail::draw_categorical(spec.mu0, rng);
  double t = 0.0;
  path.visits.emplace_back(mode, t);
  while (t < spec.t_f) {
    const auto out = spec.out_edges(mode);
    if (out.empty()) break;  // absorbing
    double hold = 0.0;
    int next = -1;
    const bool given =
        spec.shared.count(mode) > 0 || out.size() == 1 || out[0]->prob.has_value();
    if (given) {
      Vector p(static_cast<Eigen::Index>(out.size()));
      for (size_t i = 0; i < out.size(); ++i)
        p(static_cast<Eigen::Index>(i)) = out[i]->prob.value_or(1.0);
      next = out[static_cast<size_t>(detail::draw_categorical(p, rng))]->to;
      if (auto it = spec.shared.find(mode); it != spec.shared.end()) {
        hold = it->second.law ? it->second.law->sample(rng) : it->second.model->sample(rng);
      } else {
        for (const auto* e : out)
          if (e->to == next) hold = detail::draw_holding(*e, rng);
      }
    } else {
      hold = std::numeric_limits<double>::infinity();
      for (const auto* e : out) {
        const double d = detail::draw_holding(*e, rng);
        if (d < hold) {
          hold = d;
          next = e->to;
        }
      }
    }
    t += hold;
    if (t >= spec.t_f) break;
    mode = next;
    path.visits.emplace_back(mode, t);
  }
  return path;
}

struct MonteCarloReport {
  long long paths = 0;
  double mean_cost = 0.0;
  double std_error = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> checkpoint_times;
  std::vector<double> checkpoint_mean_x2;  // E||x(t)||^2 estimates
};

namespace detail {

struct PathAccumulator {
  double cost = 0.0;
  std::vector<double> x2_at;  // ||x||^2 at each checkpoint
};

/// Closed-loop integration of one path; cost carried as an augmented state.
inline PathAccumulator integrate_path(const SemiMarkovSpec& spec, const GainSchedule& gains,
                                      const PathRecord& path,
                                      const std::vector<double>& checkpoints) {
  PathAccumulator acc;
  acc.x2_at.assign(checkpoints.size(), 0.0);
  Vector x = spec.x0;
  double cost = 0.0;
  const double x2_floor = 1e-24 * std::max(spec.x0.squaredNorm(), 1e-30);
  size_t ck = 0;
  bool dead = false;

  for (size_t seg = 0; seg < path.visits.size(); ++seg) {
    const int mode = path.visits[seg].first;
    const double t0 = path.visits[seg].second;
    const double t1 = seg + 1 < path.visits.size() ? path.visits[seg + 1].second : spec.t_f;
    const auto& dyn = spec.modes[static_cast<size_t>(mode)];
    auto rhs = [&](double t, const Vector& xv, double& cdot) {
      const Matrix g = gains.eval(mode, t);
      const Vector u = g * xv;
      cdot = xv.dot(dyn.Q * xv) + u.dot(dyn.R * u);
      return (dyn.A * xv + dyn.B * u).eval();
    };
    const double abar_norm =
        (dyn.A + dyn.B * gains.eval(mode, t0)).lpNorm<Eigen::Infinity>();
    const double h_sim = std::min(gains.grid.h, 1.0 / (10.0 * std::max(abar_norm, 1e-12)));
    double t = t0;
    while (t < t1 - 1e-15) {
      double h = std::min(h_sim, t1 - t);
      if (ck < checkpoints.size() && checkpoints[ck] > t && checkpoints[ck] <= t1)
        h = std::min(h, checkpoints[ck] - t);
      if (!dead) {
        double c1, c2, c3, c4;
        const Vector k1 = rhs(t, x, c1);
        const Vector k2 = rhs(t + h / 2, x + (h / 2) * k1, c2);
        const Vector k3 = rhs(t + h / 2, x + (h / 2) * k2, c3);
        const Vector k4 = rhs(t + h, x + h * k3, c4);
        x += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
        cost += (h / 6.0) * (c1 + 2 * c2 + 2 * c3 + c4);
        if (x.squaredNorm() < x2_floor) {
          dead = true;  // remaining cost contribution is negligible
          x.setZero();
        }
      }
      t += h;
      while (ck < checkpoints.size() && checkpoints[ck] <= t + 1e-12) {
        acc.x2_at[ck] = x.squaredNorm();
        ++ck;
      }
    }
  }
  while (ck < checkpoints.size()) acc.x2_at[ck++] = x.squaredNorm();
  const auto& dyn_last = spec.modes[static_cast<size_t>(path.visits.back().first)];
  cost += x.dot(dyn_last.S * x);
  acc.cost = cost;
  return acc;
}

}  // namespace detail

/// Monte Carlo cost estimate over N independent paths. Per-path RNG streams are
/// derived from (seed, index), so the result is independent of execution order
/// and thread count.
inline MonteCarloReport empirical_cost(const SemiMarkovSpec& spec, const GainSchedule& gains,
                                       long long n_paths, std::uint64_t seed,
                                       const std::vector<double>& checkpoints = {}) {
  if (n_paths < 1) throw std::invalid_argument("empirical_cost: need at least one path");
  spec.check();
  const RngStream root(seed);
  std::vector<double> costs(static_cast<size_t>(n_paths));
  std::vector<std::vector<double>> x2(checkpoints.size(),
                                      std::vector<double>(static_cast<size_t>(n_paths)));

  auto run_range = [&](long long lo, long long hi) {
    for (long long p = lo; p < hi; ++p) {
      RngStream rng = root.fork(static_cast<std::uint64_t>(p));
      const PathRecord path = sample_path(spec, rng);
      const auto acc = detail::integrate_path(spec, gains, path, checkpoints);
      costs[static_cast<size_t>(p)] = acc.cost;
      for (size_t c = 0; c < checkpoints.size(); ++c)
        x2[c][static_cast<size_t>(p)] = acc.x2_at[c];
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const auto workers = static_cast<long long>(std::min<unsigned>(hw, 8));
  if (workers > 1 && n_paths >= 256) {
    std::vector<std::thread> pool;
    const long long chunk = (n_paths + workers - 1) / workers;
    for (long long w = 0; w < workers; ++w)
      pool.emplace_back(run_range, w * chunk, std::min(n_paths, (w + 1) * chunk));
    for (auto& th : pool) th.join();
  } else {
    run_range(0, n_paths);
  }

  MonteCarloReport rep;
  rep.paths = n_paths;
  rep.seed = seed;
  rep.checkpoint_times = checkpoints;
  const double n = static_cast<double>(n_paths);
  const double mean = std::accumulate(costs.begin(), costs.end(), 0.0) / n;
  double var = 0.0;
  for (double c : costs) var += (c - mean) * (c - mean);
  var /= std::max(1.0, n - 1.0);
  rep.mean_cost = mean;
  rep.std_error = std::sqrt(var / n);
  for (const auto& col : x2)
    rep.checkpoint_mean_x2.push_back(std::accumulate(col.begin(), col.end(), 0.0) / n);
  return rep;
}

}  // namespace smjls
