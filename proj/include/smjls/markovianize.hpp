#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smjls/phase_model.hpp"
#include "smjls/quadrature.hpp"
#include "smjls/semi_markov.hpp"

namespace smjls {

/// Quadrature view of a conditional holding law.
struct HoldingLaw {
  std::function<double(double)> pdf, ccdf;
  double horizon = 0.0;  // ccdf below ~1e-10 past this point

  static HoldingLaw from(const AnalyticLaw& law) {
    return {[law](double t) { return law.pdf(t); },
            [law](double t) { return law.ccdf(t); }, law.quantile(1.0 - 1e-10)};
  }
  static HoldingLaw from(const PhaseModel& model) {
    return {[model](double t) { return model.pdf_at(t); },
            [model](double t) { return model.ccdf_at(t); }, model.truncation_horizon()};
  }
};

/// Embedded transition probabilities of racing conditional laws:
/// p_ij = P[holding toward j wins] = int f_ij prod_{l != j} ccdf_il dt.
inline std::map<int, double> embedded_probability(const std::map<int, HoldingLaw>& racers) {
  if (racers.empty()) throw std::invalid_argument("embedded_probability: no successors");
  std::map<int, double> p;
  if (racers.size() == 1) {
    p[racers.begin()->first] = 1.0;
    return p;
  }
  double horizon = 0.0;
  for (const auto& [j, law] : racers) horizon = std::max(horizon, law.horizon);
  double total = 0.0;
  for (const auto& [j, law] : racers) {
    auto integrand = [&](double t) {
      double v = law.pdf(t);
      for (const auto& [l, other] : racers)
        if (l != j) v *= other.ccdf(t);
      return v;
    };
    const double pj = integrate(integrand, 0.0, horizon, 1e-11);
    p[j] = pj;
    total += pj;
  }
  if (std::abs(total - 1.0) > 1e-4)
    throw std::runtime_error("embedded_probability: quadrature mass defect " +
                             std::to_string(std::abs(total - 1.0)));
  for (auto& [j, pj] : p) pj /= total;
  return p;
}

/// Expanded (pseudo-)Markov chain over phases.
struct ClusteredChain {
  struct Block {
    int mode = -1;         // cluster index
    int offset = 0, size = 0;
    double entry_weight = 1.0;  // share of mass entering the mode routed here
  };

  Matrix pi_bar;                        // n_v x n_v transition-rate matrix
  std::vector<int> cluster_of;          // phase -> cluster
  std::vector<Block> blocks;
  std::vector<ModeDynamics> phase_dyn;  // per-phase dynamics/weights
  Eigen::RowVectorXd mu0;               // initial phase probabilities
  Vector x0;
  double t_f = 0.0;
  bool pseudo = false;                  // any ME block present

  Eigen::Index phase_count() const { return pi_bar.rows(); }
  int cluster_count() const {
    int mx = -1;
    for (int c : cluster_of) mx = std::max(mx, c);
    return mx + 1;
  }

  std::vector<int> cluster_phases(int k) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(cluster_of.size()); ++i)
      if (cluster_of[i] == k) out.push_back(i);
    return out;
  }

  /// All phases of cluster k share one (A, B, Q, R, S) tuple.
  bool homogeneous(int k) const {
    const auto ph = cluster_phases(k);
    for (size_t i = 1; i < ph.size(); ++i)
      if (!phase_dyn[static_cast<size_t>(ph[i])].same_as(phase_dyn[static_cast<size_t>(ph[0])]))
        return false;
    return true;
  }

  const ModeDynamics& cluster_dynamics(int k) const {
    return phase_dyn[static_cast<size_t>(cluster_phases(k).front())];
  }

  void check() const {
    const Eigen::Index n = pi_bar.rows();
    if (pi_bar.cols() != n || static_cast<Eigen::Index>(cluster_of.size()) != n ||
        mu0.size() != n || static_cast<Eigen::Index>(phase_dyn.size()) != n)
      throw std::invalid_argument("ClusteredChain: inconsistent sizes");
    if ((pi_bar.rowwise().sum().array().abs() > 1e-9).any())
      throw std::invalid_argument("ClusteredChain: rows of the rate matrix must sum to 0");
    if (std::abs(mu0.sum() - 1.0) > 1e-9 || (mu0.array() < -1e-12).any())
      throw std::invalid_argument("ClusteredChain: mu0 must be a probability vector");
    if (!pseudo) {
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
          if (i != j && pi_bar(i, j) < -1e-12)
            throw std::invalid_argument("ClusteredChain: negative rate in a PH chain");
    }
  }
};

namespace detail {

inline const PhaseModel& edge_model(const EdgeSpec& e) {
  if (!e.model) throw std::invalid_argument("assemble_chain: edge lacks a phase model");
  return *e.model;
}

}  // namespace detail

/// Resolve racing-law embedded probabilities; given probabilities pass through.
inline std::map<std::pair<int, int>, double> resolve_probabilities(const SemiMarkovSpec& spec) {
  std::map<std::pair<int, int>, double> p;
  for (int i = 0; i < spec.mode_count(); ++i) {
    const auto out = spec.out_edges(i);
    if (out.empty()) continue;
    const bool given = spec.shared.count(i) > 0 || out.size() == 1 || out[0]->prob.has_value();
    if (given) {
      for (const auto* e : out) p[{i, e->to}] = e->prob.value_or(1.0);
    } else {
      std::map<int, HoldingLaw> racers;
      for (const auto* e : out)
        racers.emplace(e->to, e->model ? HoldingLaw::from(*e->model)
                                       : HoldingLaw::from(e->law.value()));
      for (const auto& [j, pj] : embedded_probability(racers)) p[{i, j}] = pj;
    }
  }
  return p;
}

/// Expand the semi-Markov spec into the clustered chain: one diagonal block per
/// conditional model (or per mode when the holding law is shared), exit vectors
/// routed to successor entry phases with the probability split applied at the
/// predecessor, and the initial mode mass split across the mode's blocks.
inline ClusteredChain assemble_chain(const SemiMarkovSpec& spec) {
  spec.check();
  const auto probs = resolve_probabilities(spec);

  ClusteredChain chain;
  chain.x0 = spec.x0;
  chain.t_f = spec.t_f;

  struct ModeLayout {
    std::vector<ClusteredChain::Block> blocks;
    std::vector<const PhaseModel*> models;  // null for an absorbing phase
    std::vector<int> successor;             // -1 when the exit splits by edge
  };
  std::vector<ModeLayout> layout(static_cast<size_t>(spec.mode_count()));
  int offset = 0;
  for (int i = 0; i < spec.mode_count(); ++i) {
    auto& L = layout[static_cast<size_t>(i)];
    const auto out = spec.out_edges(i);
    if (out.empty()) {
      L.blocks.push_back({i, offset, 1, 1.0});
      L.models.push_back(nullptr);
      L.successor.push_back(-1);
      offset += 1;
    } else if (auto it = spec.shared.find(i); it != spec.shared.end()) {
      if (!it->second.model)
        throw std::invalid_argument("assemble_chain: shared holding lacks a phase model");
      const PhaseModel& m = *it->second.model;
      L.blocks.push_back({i, offset, static_cast<int>(m.dim()), 1.0});
      L.models.push_back(&m);
      L.successor.push_back(-1);  // split over all out-edges at exit
      offset += static_cast<int>(m.dim());
      chain.pseudo = chain.pseudo || m.kind() == PhaseKind::ME;
    } else {
      for (const auto* e : out) {
        const PhaseModel& m = detail::edge_model(*e);
        L.blocks.push_back({i, offset, static_cast<int>(m.dim()), probs.at({i, e->to})});
        L.models.push_back(&m);
        L.successor.push_back(e->to);
        offset += static_cast<int>(m.dim());
        chain.pseudo = chain.pseudo || m.kind() == PhaseKind::ME;
      }
    }
  }
  const int nv = offset;
  chain.pi_bar = Matrix::Zero(nv, nv);
  chain.mu0 = Eigen::RowVectorXd::Zero(nv);
  chain.cluster_of.resize(static_cast<size_t>(nv));
  chain.phase_dyn.resize(static_cast<size_t>(nv));

  auto route_exit = [&](const ClusteredChain::Block& blk, const Vector& eta, int succ_mode,
                        double weight) {
    // weight * eta into each successor-mode block's first phase, split by that
    // block's entry share.
    for (const auto& sb : layout[static_cast<size_t>(succ_mode)].blocks)
      for (int r = 0; r < blk.size; ++r)
        chain.pi_bar(blk.offset + r, sb.offset) += weight * sb.entry_weight * eta(r);
  };

  for (int i = 0; i < spec.mode_count(); ++i) {
    const auto& L = layout[static_cast<size_t>(i)];
    const auto out = spec.out_edges(i);
    for (size_t b = 0; b < L.blocks.size(); ++b) {
      const auto& blk = L.blocks[b];
      chain.blocks.push_back(blk);
      for (int r = 0; r < blk.size; ++r) {
        chain.cluster_of[static_cast<size_t>(blk.offset + r)] = i;
        chain.phase_dyn[static_cast<size_t>(blk.offset + r)] = spec.modes[static_cast<size_t>(i)];
      }
      chain.mu0(blk.offset) = spec.mu0(i) * blk.entry_weight;
      if (!L.models[b]) continue;  // absorbing: zero row
      const PhaseModel& m = *L.models[b];
      chain.pi_bar.block(blk.offset, blk.offset, blk.size, blk.size) = m.sub_generator();
      if (L.successor[b] >= 0) {
        route_exit(blk, m.exit_vector(), L.successor[b], 1.0);
      } else {
        for (const auto* e : out)
          route_exit(blk, m.exit_vector(), e->to, probs.at({i, e->to}));
      }
    }
  }
  chain.check();
  return chain;
}

/// Replace one holding-model block by a pdf-equivalent realization via the
/// convention-preserving similarity T (T*1 = 1, e1' T = e1'). All chain-level
/// observables (occupancies, gains, costs) are invariant under this map.
inline ClusteredChain pdf_equivalent_variant(const ClusteredChain& chain, int mode,
                                             const Matrix& transform) {
  const Eigen::Index d = transform.rows();
  if (transform.cols() != d) throw std::domain_error("pdf_equivalent_variant: T not square");
  if ((transform * Vector::Ones(d) - Vector::Ones(d)).lpNorm<Eigen::Infinity>() > 1e-10)
    throw std::domain_error("pdf_equivalent_variant: T*1 = 1 violated");
  if ((transform.row(0) - Eigen::RowVectorXd::Unit(d, 0)).lpNorm<Eigen::Infinity>() > 1e-10)
    throw std::domain_error("pdf_equivalent_variant: e1' T = e1' violated");
  const ClusteredChain::Block* target = nullptr;
  for (const auto& b : chain.blocks)
    if (b.mode == mode && b.size == d) {
      target = &b;
      break;
    }
  if (!target)
    throw std::domain_error("pdf_equivalent_variant: no block of this mode matches T's size");
  if (d == 1) return chain;  // only the identity preserves the conventions

  const Eigen::Index nv = chain.phase_count();
  Matrix S = Matrix::Identity(nv, nv);
  S.block(target->offset, target->offset, d, d) = transform;
  ClusteredChain out = chain;
  out.pi_bar = S.partialPivLu().solve(chain.pi_bar * S);
  out.mu0 = chain.mu0 * S;
  out.pseudo = true;  // transformed block generally loses the PH sign pattern

  // certify the block pdf is unchanged
  const Matrix p0 = chain.pi_bar.block(target->offset, target->offset, d, d);
  const Matrix p1 = out.pi_bar.block(target->offset, target->offset, d, d);
  const Vector e0 = -p0 * Vector::Ones(d), e1v = -p1 * Vector::Ones(d);
  const double horizon = PhaseModel(p0, PhaseKind::ME).truncation_horizon(1e-8);
  for (int k = 0; k <= 200; ++k) {
    const double t = horizon * k / 200.0;
    const double f0 = ((p0 * t).exp() * e0)(0), f1 = ((p1 * t).exp() * e1v)(0);
    if (std::abs(f0 - f1) > 1e-10 * std::max(1.0, std::abs(f0)))
      throw std::domain_error("pdf_equivalent_variant: transformed block changes the pdf");
  }
  out.check();
  return out;
}

}  // namespace smjls
