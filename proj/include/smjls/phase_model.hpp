#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

namespace smjls {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Counter-based 64-bit generator used for all sampling. Hand-rolled so that
/// draw sequences are identical across standard-library implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform draw in (0, 1); never returns exactly 0 or 1.
  double uniform() {
    const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
  }

  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  /// Derives an independent stream for a sub-task (e.g. one Monte Carlo path).
  RngStream fork(std::uint64_t index) const {
    RngStream s(state_ ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
    s.next_u64();
    return s;
  }

 private:
  std::uint64_t state_;
};

enum class PhaseKind { PH, ME };

struct ValidityReport {
  bool valid = false;
  bool hurwitz = false;
  bool sign_constraints_ok = false;  // PH sign pattern
  bool pdf_nonnegative = false;
  bool integrates_to_one = false;
  bool ph_representable = false;  // dominant eigenvalue real & simple
  double min_pdf = 0.0;
  double integral = 0.0;
  double dominant_eig_real = 0.0;
  std::string detail;
};

/// Holding-time distribution in matrix-exponential form: pdf(t) = a' exp(Pi t) eta
/// with eta = -Pi*1 and a = e1. PH kind additionally satisfies the Markov-chain
/// sign pattern on Pi.
class PhaseModel {
 public:
  PhaseModel(Matrix sub_generator, PhaseKind kind)
      : pi_(std::move(sub_generator)), kind_(kind) {
    if (pi_.rows() != pi_.cols() || pi_.rows() < 1)
      throw std::invalid_argument("PhaseModel: sub-generator must be square");
    finish_construction();
  }

  /// General starting vector: normalized to alpha = e1 by a similarity
  /// transform with unit row sums. A PH model whose transformed sub-generator
  /// breaks the sign constraints is downgraded to ME kind.
  PhaseModel(const Matrix& sub_generator, const Vector& alpha, PhaseKind kind)
      : kind_(kind) {
    const Eigen::Index m = sub_generator.rows();
    if (sub_generator.cols() != m || alpha.size() != m)
      throw std::invalid_argument("PhaseModel: dimension mismatch");
    if (std::abs(alpha.sum() - 1.0) > 1e-9)
      throw std::invalid_argument("PhaseModel: alpha must sum to 1");
    if ((alpha.array() < -1e-12).any())
      throw std::invalid_argument("PhaseModel: alpha must be non-negative");
    if (m == 1 || (alpha - Vector::Unit(m, 0)).lpNorm<Eigen::Infinity>() < 1e-14) {
      pi_ = sub_generator;
      finish_construction();
      return;
    }
    // T: first row alpha', remaining rows unit vectors; T*1 = 1 holds since
    // every row sums to one. Need alpha(0) != 0 for invertibility; otherwise
    // swap in a unit row for a phase with zero start mass.
    Matrix T = Matrix::Identity(m, m);
    T.row(0) = alpha.transpose();
    if (std::abs(alpha(0)) < 1e-12) {
      // Put the mass-carrying phase first via a permuted unit-row matrix.
      Eigen::Index j = 0;
      alpha.maxCoeff(&j);
      T.row(j) = Vector::Unit(m, 0).transpose();
    }
    pi_ = T * sub_generator * T.inverse();
    if (kind_ == PhaseKind::PH && !ph_sign_pattern_ok(pi_)) kind_ = PhaseKind::ME;
    finish_construction();
  }

  static PhaseModel exponential(double rate) {
    if (rate <= 0.0) throw std::invalid_argument("exponential: rate must be > 0");
    Matrix pi(1, 1);
    pi(0, 0) = -rate;
    return PhaseModel(pi, PhaseKind::PH);
  }

  /// Coxian model: upper bi-diagonal sub-generator from diagonal and
  /// super-diagonal entries (Figure-1 prose constraints; exit rates are the
  /// row-sum complements).
  static PhaseModel coxian(const std::vector<double>& diag,
                           const std::vector<double>& super) {
    const auto m = static_cast<Eigen::Index>(diag.size());
    if (super.size() + 1 != diag.size())
      throw std::invalid_argument("coxian: need m-1 super-diagonal entries");
    Matrix pi = Matrix::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) pi(i, i) = diag[static_cast<size_t>(i)];
    for (Eigen::Index i = 0; i + 1 < m; ++i)
      pi(i, i + 1) = super[static_cast<size_t>(i)];
    return PhaseModel(pi, PhaseKind::PH);
  }

  Eigen::Index dim() const { return pi_.rows(); }
  const Matrix& sub_generator() const { return pi_; }
  const Vector& exit_vector() const { return eta_; }
  Vector start_vector() const { return Vector::Unit(dim(), 0); }
  PhaseKind kind() const { return kind_; }

  double pdf_at(double t) const {
    if (t < 0.0) throw std::domain_error("pdf_at: t must be >= 0");
    return ((pi_ * t).exp() * eta_)(0);
  }

  double ccdf_at(double t) const {
    if (t < 0.0) throw std::domain_error("ccdf_at: t must be >= 0");
    return (pi_ * t).exp().row(0).sum();
  }

  double cdf_at(double t) const { return 1.0 - ccdf_at(t); }

  /// n-th raw moment (-1)^n n! a' Pi^{-n} 1, via repeated linear solves.
  double moment(int n) const {
    if (n < 1) throw std::invalid_argument("moment: n must be >= 1");
    const auto lu = pi_.partialPivLu();
    Vector v = Vector::Ones(dim());
    double factor = 1.0;
    for (int k = 1; k <= n; ++k) {
      v = lu.solve(v);
      if (!v.allFinite())
        throw std::runtime_error("moment: sub-generator singular to tolerance");
      factor *= -static_cast<double>(k);
    }
    return factor * v(0);
  }

  double mean() const { return moment(1); }

  ValidityReport validate(double horizon, int grid_points) const {
    if (horizon <= 0.0 || grid_points < 2)
      throw std::invalid_argument("validate: horizon > 0, grid_points >= 2");
    ValidityReport rep;
    const Eigen::VectorXcd eigs = pi_.eigenvalues();
    double max_re = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < eigs.size(); ++i)
      max_re = std::max(max_re, eigs(i).real());
    rep.dominant_eig_real = max_re;
    rep.hurwitz = max_re < 0.0;
    // Dominant eigenvalue real and simple among the maximal-real-part set.
    int at_max = 0;
    bool max_is_real = false;
    for (Eigen::Index i = 0; i < eigs.size(); ++i) {
      if (eigs(i).real() > max_re - 1e-9 * std::max(1.0, std::abs(max_re))) {
        ++at_max;
        if (std::abs(eigs(i).imag()) < 1e-9) max_is_real = true;
      }
    }
    rep.ph_representable = rep.hurwitz && max_is_real && at_max == 1;

    rep.sign_constraints_ok = ph_sign_pattern_ok(pi_) && (eta_.array() >= -1e-12).all();
    if (rep.hurwitz) {
      rep.integral = -pi_.partialPivLu().solve(eta_)(0);
      rep.integrates_to_one = std::abs(rep.integral - 1.0) <= 1e-6;
    }
    rep.min_pdf = 0.0;
    if (kind_ == PhaseKind::PH) {
      rep.pdf_nonnegative = rep.sign_constraints_ok;
      rep.valid = rep.hurwitz && rep.sign_constraints_ok;
    } else {
      // Grid certificate; one expm of the step reused multiplicatively.
      const double h = horizon / (grid_points - 1);
      const Matrix step = (pi_ * h).exp();
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Unit(dim(), 0);
      double mn = std::numeric_limits<double>::infinity();
      for (int j = 0; j < grid_points; ++j) {
        mn = std::min(mn, row.dot(eta_));
        row *= step;
      }
      rep.min_pdf = mn;
      rep.pdf_nonnegative = mn >= -1e-9;
      rep.valid = rep.hurwitz && rep.pdf_nonnegative && rep.integrates_to_one;
    }
    if (!rep.valid) {
      rep.detail = !rep.hurwitz ? "sub-generator not Hurwitz"
                   : !rep.pdf_nonnegative ? "pdf negative on grid"
                                          : "pdf does not integrate to one";
    } else if (kind_ == PhaseKind::ME && !rep.ph_representable) {
      rep.detail = "not PH-representable";
    }
    return rep;
  }

  /// Exact phase-walk draw. ME models have no underlying chain to walk.
  double sample(RngStream& rng) const {
    if (kind_ != PhaseKind::PH)
      throw std::runtime_error("sample: unsupported for ME kind; sample the original law");
    const Eigen::Index m = dim();
    Eigen::Index phase = 0;
    double t = 0.0;
    while (true) {
      const double total = -pi_(phase, phase);
      t += rng.exponential(total);
      // choose exit vs. internal transition
      double u = rng.uniform() * total;
      if (u < eta_(phase)) return t;
      u -= eta_(phase);
      Eigen::Index next = phase;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (j == phase) continue;
        if (u < pi_(phase, j)) {
          next = j;
          break;
        }
        u -= pi_(phase, j);
      }
      phase = next;
    }
  }

  /// Smallest t with ccdf(t) < eps, capped at cap_means * mean.
  double truncation_horizon(double eps = 1e-10, double cap_means = 1e6) const {
    const double mu = mean();
    double lo = 0.0, hi = std::max(mu, 1e-300);
    const double cap = cap_means * mu;
    while (ccdf_at(hi) >= eps && hi < cap) hi *= 2.0;
    hi = std::min(hi, cap);
    for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (ccdf_at(mid) >= eps ? lo : hi) = mid;
    }
    return hi;
  }

 private:
  static bool ph_sign_pattern_ok(const Matrix& pi) {
    for (Eigen::Index i = 0; i < pi.rows(); ++i) {
      if (pi(i, i) >= 0.0) return false;
      for (Eigen::Index j = 0; j < pi.cols(); ++j)
        if (i != j && pi(i, j) < -1e-12) return false;
    }
    return true;
  }

  void finish_construction() {
    eta_ = -pi_ * Vector::Ones(dim());
    double max_re = -std::numeric_limits<double>::infinity();
    const Eigen::VectorXcd eigs = pi_.eigenvalues();
    for (Eigen::Index i = 0; i < eigs.size(); ++i)
      max_re = std::max(max_re, eigs(i).real());
    if (max_re >= 0.0)
      throw std::invalid_argument("PhaseModel: sub-generator must be Hurwitz");
    if (kind_ == PhaseKind::PH) {
      if (!ph_sign_pattern_ok(pi_) || (eta_.array() < -1e-12).any())
        throw std::invalid_argument("PhaseModel: PH sign constraints violated");
    }
  }

  Matrix pi_;
  Vector eta_;
  PhaseKind kind_;
};

struct Exponential {
  double rate;
};
struct Weibull {
  double shape;
  double scale;
};

/// Analytic reference law: sampling target and fitting ground truth.
class AnalyticLaw {
 public:
  explicit AnalyticLaw(Exponential e) : law_(e) {
    if (e.rate <= 0.0) throw std::invalid_argument("Exponential: rate > 0 required");
  }
  explicit AnalyticLaw(Weibull w) : law_(w) {
    if (w.shape <= 0.0 || w.scale <= 0.0)
      throw std::invalid_argument("Weibull: shape and scale must be > 0");
  }

  double pdf(double t) const {
    if (t < 0.0) return 0.0;
    if (const auto* e = std::get_if<Exponential>(&law_))
      return e->rate * std::exp(-e->rate * t);
    const auto& w = std::get<Weibull>(law_);
    if (t == 0.0) return w.shape == 1.0 ? 1.0 / w.scale : (w.shape < 1.0 ? std::numeric_limits<double>::infinity() : 0.0);
    const double z = t / w.scale;
    return (w.shape / w.scale) * std::pow(z, w.shape - 1.0) * std::exp(-std::pow(z, w.shape));
  }

  double cdf(double t) const {
    if (t <= 0.0) return 0.0;
    if (const auto* e = std::get_if<Exponential>(&law_))
      return -std::expm1(-e->rate * t);
    const auto& w = std::get<Weibull>(law_);
    return -std::expm1(-std::pow(t / w.scale, w.shape));
  }

  double ccdf(double t) const { return 1.0 - cdf(t); }

  double quantile(double p) const {
    if (p < 0.0 || p >= 1.0) throw std::domain_error("quantile: p in [0,1)");
    if (const auto* e = std::get_if<Exponential>(&law_))
      return -std::log1p(-p) / e->rate;
    const auto& w = std::get<Weibull>(law_);
    return w.scale * std::pow(-std::log1p(-p), 1.0 / w.shape);
  }

  double mean() const {
    if (const auto* e = std::get_if<Exponential>(&law_)) return 1.0 / e->rate;
    const auto& w = std::get<Weibull>(law_);
    return w.scale * std::tgamma(1.0 + 1.0 / w.shape);
  }

  double sample(RngStream& rng) const { return quantile(rng.uniform()); }

  bool is_exponential() const {
    if (std::holds_alternative<Exponential>(law_)) return true;
    return std::get<Weibull>(law_).shape == 1.0;  // reduces to rate 1/scale
  }
  const std::variant<Exponential, Weibull>& law() const { return law_; }

 private:
  std::variant<Exponential, Weibull> law_;
};

/// Holding-time draw from either representation. PhaseModel must be PH kind.
class SamplableLaw {
 public:
  explicit SamplableLaw(AnalyticLaw law) : impl_(std::move(law)) {}
  explicit SamplableLaw(PhaseModel model) : impl_(std::move(model)) {}

  double sample(RngStream& rng) const {
    if (const auto* a = std::get_if<AnalyticLaw>(&impl_)) return a->sample(rng);
    return std::get<PhaseModel>(impl_).sample(rng);
  }

 private:
  std::variant<AnalyticLaw, PhaseModel> impl_;
};

}  // namespace smjls
