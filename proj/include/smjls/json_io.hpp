#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "smjls/control.hpp"
#include "smjls/fitting.hpp"
#include "smjls/markovianize.hpp"
#include "smjls/semi_markov.hpp"
#include "smjls/simulate.hpp"

namespace smjls {

using nlohmann::json;

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace io_detail {

inline void require_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!obj.is_object()) throw SchemaError(where + ": expected an object");
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) throw SchemaError(where + ": unknown key '" + k + "'");
}

inline Matrix matrix_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw SchemaError(where + ": expected a nested array");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<size_t>(r)].size()) != cols)
      throw SchemaError(where + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = j[static_cast<size_t>(r)][static_cast<size_t>(c)].get<double>();
  }
  return m;
}

inline json matrix_to(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

inline Vector vector_from(const json& j, const std::string& where) {
  if (!j.is_array()) throw SchemaError(where + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

}  // namespace io_detail

inline json phase_model_to_json(const PhaseModel& model) {
  json out;
  out["kind"] = model.kind() == PhaseKind::PH ? "ph" : "me";
  out["dim"] = model.dim();
  json pi = json::array();  // row-major
  for (Eigen::Index r = 0; r < model.dim(); ++r)
    for (Eigen::Index c = 0; c < model.dim(); ++c) pi.push_back(model.sub_generator()(r, c));
  out["pi"] = pi;
  return out;
}

inline PhaseModel phase_model_from_json(const json& j) {
  io_detail::require_keys(j, {"kind", "dim", "pi"}, "PhaseModel");
  const auto dim = j.at("dim").get<Eigen::Index>();
  const auto& pi_arr = j.at("pi");
  if (static_cast<Eigen::Index>(pi_arr.size()) != dim * dim)
    throw SchemaError("PhaseModel: pi must hold dim*dim entries");
  Matrix pi(dim, dim);
  for (Eigen::Index r = 0; r < dim; ++r)
    for (Eigen::Index c = 0; c < dim; ++c)
      pi(r, c) = pi_arr[static_cast<size_t>(r * dim + c)].get<double>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "ph" && kind != "me") throw SchemaError("PhaseModel: kind must be ph or me");
  return PhaseModel(pi, kind == "ph" ? PhaseKind::PH : PhaseKind::ME);
}

inline json chain_to_json(const ClusteredChain& chain) {
  json out;
  out["phase_count"] = chain.phase_count();
  out["pi_bar"] = io_detail::matrix_to(chain.pi_bar);
  out["cluster_of"] = chain.cluster_of;
  out["mu0"] = std::vector<double>(chain.mu0.data(), chain.mu0.data() + chain.mu0.size());
  out["x0"] = std::vector<double>(chain.x0.data(), chain.x0.data() + chain.x0.size());
  out["t_f"] = chain.t_f;
  out["pseudo"] = chain.pseudo;
  json dyn = json::array();
  for (const auto& d : chain.phase_dyn) {
    json m;
    m["A"] = io_detail::matrix_to(d.A);
    m["B"] = io_detail::matrix_to(d.B);
    m["Q"] = io_detail::matrix_to(d.Q);
    m["R"] = io_detail::matrix_to(d.R);
    m["S"] = io_detail::matrix_to(d.S);
    dyn.push_back(m);
  }
  out["phase_dynamics"] = dyn;
  return out;
}

inline json cost_report_to_json(const CostReport& rep) {
  json out;
  out["J"] = rep.J;
  out["J_trace"] = rep.J_trace;
  out["J_integral"] = rep.J_integral;
  out["max_form_mismatch"] = rep.max_mismatch;
  out["forms_agree"] = rep.forms_agree;
  json l0 = json::array();
  for (const auto& m : rep.lambda0) l0.push_back(io_detail::matrix_to(m));
  out["lambda0"] = l0;
  return out;
}

inline json monte_carlo_report_to_json(const MonteCarloReport& rep) {
  json out;
  out["paths"] = rep.paths;
  out["mean_cost"] = rep.mean_cost;
  out["std_error"] = rep.std_error;
  out["seed"] = rep.seed;
  out["checkpoint_times"] = rep.checkpoint_times;
  out["checkpoint_mean_x2"] = rep.checkpoint_mean_x2;
  return out;
}

inline std::string gains_to_csv(const GainSchedule& gains) {
  std::ostringstream os;
  os << "t,cluster,gamma_row_major\n";
  os.precision(12);
  for (size_t k = 0; k < gains.gamma.size(); ++k)
    for (int j = 0; j <= gains.grid.steps; ++j) {
      const Matrix& g = gains.gamma[k][static_cast<size_t>(j)];
      os << gains.grid.t(j) << ',' << k;
      for (Eigen::Index r = 0; r < g.rows(); ++r)
        for (Eigen::Index c = 0; c < g.cols(); ++c) os << ',' << g(r, c);
      os << '\n';
    }
  return os.str();
}

inline std::string mu_to_csv(const ClusteredChain& chain, const MuPath& mu,
                             const TimeGrid& grid) {
  std::ostringstream os;
  os.precision(12);
  os << "t";
  for (Eigen::Index i = 0; i < chain.phase_count(); ++i) os << ",mu_" << i;
  for (int k = 0; k < chain.cluster_count(); ++k) os << ",cluster_" << k;
  os << '\n';
  for (int j = 0; j <= grid.steps; ++j) {
    os << grid.t(j);
    const auto& row = mu.node[static_cast<size_t>(j)];
    for (Eigen::Index i = 0; i < row.size(); ++i) os << ',' << row(i);
    for (int k = 0; k < chain.cluster_count(); ++k) os << ',' << mu.cluster_sum(chain, j, k);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

/// How to obtain the markovianization block for an edge or shared holding.
struct ModelDirective {
  std::optional<PhaseModel> exact;
  std::optional<std::pair<std::vector<double>, std::vector<double>>> realize;  // num, den asc.
  struct Fit {
    int order = 1;
    std::optional<double> beta;
    std::optional<BumpSpec> bump;
  };
  std::optional<Fit> fit;
};

struct GainDirective {
  enum class Type { Fixed, Optimal, Surrogate } type = Type::Optimal;
  std::vector<Matrix> fixed;  // per-cluster constant gains
};

struct ScenarioFile {
  std::string name, notes;
  SemiMarkovSpec spec;  // models unresolved; see directives
  std::vector<ModelDirective> edge_models;             // parallel to spec.edges
  std::map<int, ModelDirective> shared_models;         // mode -> directive
  GainDirective gains;
  std::optional<int> grid_steps;
  std::optional<double> reference_cost;
  std::optional<double> surrogate_reference_cost;
};

namespace io_detail {

inline AnalyticLaw law_from(const json& j, const std::string& where) {
  require_keys(j, {"type", "rate", "shape", "scale"}, where);
  const std::string type = j.at("type").get<std::string>();
  if (type == "exponential") return AnalyticLaw(Exponential{j.at("rate").get<double>()});
  if (type == "weibull")
    return AnalyticLaw(Weibull{j.at("shape").get<double>(), j.at("scale").get<double>()});
  throw SchemaError(where + ": unknown law type '" + type + "'");
}

inline ModelDirective model_directive_from(const json& j, const std::string& where) {
  ModelDirective d;
  if (j.contains("kind")) {
    d.exact = phase_model_from_json(j);
    return d;
  }
  require_keys(j, {"realize", "fit"}, where);
  if (j.contains("realize")) {
    const auto& r = j.at("realize");
    require_keys(r, {"num", "den"}, where + ".realize");
    d.realize = {{r.at("num").begin(), r.at("num").end()},
                 {r.at("den").begin(), r.at("den").end()}};
  }
  if (j.contains("fit")) {
    const auto& f = j.at("fit");
    require_keys(f, {"order", "beta", "bump"}, where + ".fit");
    ModelDirective::Fit fit;
    fit.order = f.at("order").get<int>();
    if (f.contains("beta")) fit.beta = f.at("beta").get<double>();
    if (f.contains("bump")) {
      const auto& b = f.at("bump");
      require_keys(b, {"amplitude", "half_width", "center"}, where + ".fit.bump");
      fit.bump = BumpSpec{b.at("amplitude").get<double>(), b.at("half_width").get<double>(),
                          b.at("center").get<double>()};
    }
    d.fit = fit;
  }
  if (!d.realize && !d.fit) throw SchemaError(where + ": empty model directive");
  return d;
}

}  // namespace io_detail

inline ScenarioFile parse_scenario(const json& j) {
  io_detail::require_keys(j,
                          {"name", "notes", "modes", "edges", "shared", "mu0", "x0", "t_f",
                           "gains", "grid", "reference_cost", "surrogate_reference_cost"},
                          "scenario");
  ScenarioFile sc;
  sc.name = j.value("name", "");
  sc.notes = j.value("notes", "");
  for (const auto& m : j.at("modes")) {
    io_detail::require_keys(m, {"A", "B", "Q", "R", "S"}, "mode");
    ModeDynamics d;
    d.A = io_detail::matrix_from(m.at("A"), "mode.A");
    d.B = io_detail::matrix_from(m.at("B"), "mode.B");
    d.Q = io_detail::matrix_from(m.at("Q"), "mode.Q");
    d.R = io_detail::matrix_from(m.at("R"), "mode.R");
    d.S = io_detail::matrix_from(m.at("S"), "mode.S");
    sc.spec.modes.push_back(std::move(d));
  }
  for (const auto& e : j.at("edges")) {
    io_detail::require_keys(e, {"from", "to", "prob", "law", "model"}, "edge");
    EdgeSpec edge;
    edge.from = e.at("from").get<int>();
    edge.to = e.at("to").get<int>();
    if (e.contains("prob")) edge.prob = e.at("prob").get<double>();
    if (e.contains("law")) edge.law = io_detail::law_from(e.at("law"), "edge.law");
    sc.edge_models.emplace_back();
    if (e.contains("model"))
      sc.edge_models.back() = io_detail::model_directive_from(e.at("model"), "edge.model");
    sc.spec.edges.push_back(std::move(edge));
  }
  if (j.contains("shared")) {
    for (const auto& s : j.at("shared")) {
      io_detail::require_keys(s, {"mode", "law", "model"}, "shared");
      const int mode = s.at("mode").get<int>();
      SharedHolding sh;
      if (s.contains("law")) sh.law = io_detail::law_from(s.at("law"), "shared.law");
      if (s.contains("model"))
        sc.shared_models[mode] =
            io_detail::model_directive_from(s.at("model"), "shared.model");
      sc.spec.shared[mode] = std::move(sh);
    }
  }
  sc.spec.mu0 = io_detail::vector_from(j.at("mu0"), "mu0");
  sc.spec.x0 = io_detail::vector_from(j.at("x0"), "x0");
  sc.spec.t_f = j.at("t_f").get<double>();

  const auto& g = j.at("gains");
  io_detail::require_keys(g, {"type", "values"}, "gains");
  const std::string type = g.at("type").get<std::string>();
  if (type == "fixed") {
    sc.gains.type = GainDirective::Type::Fixed;
    for (const auto& m : g.at("values"))
      sc.gains.fixed.push_back(io_detail::matrix_from(m, "gains.values"));
  } else if (type == "optimal") {
    sc.gains.type = GainDirective::Type::Optimal;
  } else if (type == "surrogate") {
    sc.gains.type = GainDirective::Type::Surrogate;
  } else {
    throw SchemaError("gains: unknown type '" + type + "'");
  }
  if (j.contains("grid")) {
    io_detail::require_keys(j.at("grid"), {"steps"}, "grid");
    sc.grid_steps = j.at("grid").at("steps").get<int>();
  }
  if (j.contains("reference_cost")) sc.reference_cost = j.at("reference_cost").get<double>();
  if (j.contains("surrogate_reference_cost"))
    sc.surrogate_reference_cost = j.at("surrogate_reference_cost").get<double>();
  return sc;
}

inline ScenarioFile load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open scenario file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError("scenario parse error in " + path + ": " + e.what());
  }
  return parse_scenario(j);
}

/// Resolve one model directive into a PhaseModel (fitting against `law` when a
/// fit is requested).
inline PhaseModel resolve_model(const ModelDirective& d, const std::optional<AnalyticLaw>& law,
                                PipelineReport* report = nullptr) {
  if (d.exact) return *d.exact;
  if (d.realize)
    return to_me_realization(
        RationalModel::from_polynomials(d.realize->first, d.realize->second).normalized_dc());
  if (d.fit) {
    if (!law) throw SchemaError("model fit requested but the edge has no analytic law");
    PipelineOptions opt;
    opt.beta = d.fit->beta;
    opt.bump = d.fit->bump;
    return fit_pipeline(*law, d.fit->order, opt, report);
  }
  throw SchemaError("empty model directive");
}

/// Fill in every edge/shared PhaseModel from the scenario's directives.
inline SemiMarkovSpec resolve_spec(const ScenarioFile& sc) {
  SemiMarkovSpec spec = sc.spec;
  for (size_t e = 0; e < spec.edges.size(); ++e) {
    const auto& d = sc.edge_models[e];
    if (d.exact || d.realize || d.fit)
      spec.edges[e].model = resolve_model(d, spec.edges[e].law);
  }
  for (auto& [mode, sh] : spec.shared) {
    auto it = sc.shared_models.find(mode);
    if (it != sc.shared_models.end()) sh.model = resolve_model(it->second, sh.law);
  }
  return spec;
}

/// Rate-equivalent exponential surrogate: every holding model replaced by the
/// one-phase exponential with the same mean.
inline SemiMarkovSpec exponential_surrogate(const SemiMarkovSpec& spec) {
  SemiMarkovSpec out = spec;
  auto surrogate_of = [](const std::optional<PhaseModel>& model,
                         const std::optional<AnalyticLaw>& law) -> PhaseModel {
    if (model) return PhaseModel::exponential(1.0 / model->mean());
    if (law) return PhaseModel::exponential(1.0 / law->mean());
    throw std::invalid_argument("exponential_surrogate: edge has neither model nor law");
  };
  for (auto& e : out.edges)
    if (e.model || e.law) e.model = surrogate_of(e.model, e.law);
  for (auto& [mode, sh] : out.shared) sh.model = surrogate_of(sh.model, sh.law);
  return out;
}

}  // namespace smjls
