#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smjls/phase_model.hpp"

namespace smjls {

/// Per-mode linear dynamics and quadratic weights.
struct ModeDynamics {
  Matrix A, B;     // n_x x n_x, n_x x n_u
  Matrix Q, R, S;  // running state, running input, terminal weights

  Eigen::Index state_dim() const { return A.rows(); }
  Eigen::Index input_dim() const { return B.cols(); }

  void check() const {
    const Eigen::Index nx = A.rows(), nu = B.cols();
    if (A.cols() != nx || B.rows() != nx || Q.rows() != nx || Q.cols() != nx ||
        R.rows() != nu || R.cols() != nu || S.rows() != nx || S.cols() != nx)
      throw std::invalid_argument("ModeDynamics: dimension mismatch");
    auto sym_floor = [](const Matrix& M, double floor, const char* what) {
      if ((M - M.transpose()).lpNorm<Eigen::Infinity>() > 1e-9)
        throw std::invalid_argument(std::string(what) + " must be symmetric");
      Eigen::SelfAdjointEigenSolver<Matrix> es(M);
      if (es.eigenvalues().minCoeff() < floor)
        throw std::invalid_argument(std::string(what) + " violates definiteness floor");
    };
    sym_floor(Q, -1e-9, "Q");
    sym_floor(S, -1e-9, "S");
    sym_floor(R, 1e-9, "R");
  }

  bool same_as(const ModeDynamics& o, double tol = 1e-12) const {
    auto close = [tol](const Matrix& x, const Matrix& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() &&
             (x - y).lpNorm<Eigen::Infinity>() <= tol;
    };
    return close(A, o.A) && close(B, o.B) && close(Q, o.Q) && close(R, o.R) && close(S, o.S);
  }
};

/// One directed edge of the mode graph. Exactly one of the two semantics per
/// source mode: either every outgoing edge carries a given embedded
/// probability, or none does and the conditional laws race.
struct EdgeSpec {
  int from = -1, to = -1;
  std::optional<double> prob;        // given embedded probability p_ij
  std::optional<AnalyticLaw> law;    // ground-truth conditional holding law
  std::optional<PhaseModel> model;   // markovianization block for this edge
};

/// Modes whose holding time does not depend on the successor can declare the
/// law once here; outgoing edges then carry only probabilities and the chain
/// uses the shared block with exit split p_ij * eta.
struct SharedHolding {
  std::optional<AnalyticLaw> law;
  std::optional<PhaseModel> model;
};

struct SemiMarkovSpec {
  std::vector<ModeDynamics> modes;
  std::vector<EdgeSpec> edges;
  std::map<int, SharedHolding> shared;  // mode -> unconditional holding
  Vector mu0;                           // initial mode probabilities
  Vector x0;
  double t_f = 0.0;

  int mode_count() const { return static_cast<int>(modes.size()); }

  std::vector<const EdgeSpec*> out_edges(int mode) const {
    std::vector<const EdgeSpec*> out;
    for (const auto& e : edges)
      if (e.from == mode) out.push_back(&e);
    return out;
  }

  void check() const {
    const int n = mode_count();
    if (n < 1) throw std::invalid_argument("SemiMarkovSpec: no modes");
    if (mu0.size() != n) throw std::invalid_argument("SemiMarkovSpec: mu0 size mismatch");
    if ((mu0.array() < -1e-12).any() || std::abs(mu0.sum() - 1.0) > 1e-9)
      throw std::invalid_argument("SemiMarkovSpec: mu0 must be a probability vector");
    if (t_f <= 0.0) throw std::invalid_argument("SemiMarkovSpec: t_f must be > 0");
    for (const auto& m : modes) m.check();
    for (const auto& e : edges) {
      if (e.from < 0 || e.from >= n || e.to < 0 || e.to >= n)
        throw std::invalid_argument("SemiMarkovSpec: edge endpoint out of range");
      if (e.from == e.to) throw std::invalid_argument("SemiMarkovSpec: self-loop edge");
    }
    for (int i = 0; i < n; ++i) {
      const auto out = out_edges(i);
      if (out.empty()) continue;  // absorbing mode
      const bool is_shared = shared.count(i) > 0;
      size_t with_prob = 0;
      for (const auto* e : out) with_prob += e->prob.has_value();
      if (is_shared || out.size() == 1 || with_prob > 0) {
        // given-probability semantics (single out-edge implies p = 1)
        if (out.size() > 1 && with_prob != out.size())
          throw std::invalid_argument(
              "SemiMarkovSpec: mode mixes given probabilities with racing laws");
        double sum = 0.0;
        for (const auto* e : out) sum += e->prob.value_or(1.0);
        if (std::abs(sum - 1.0) > 1e-9)
          throw std::invalid_argument("SemiMarkovSpec: embedded probabilities must sum to 1");
      }
    }
  }
};

}  // namespace smjls
