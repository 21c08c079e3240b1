#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include "smjls/json_io.hpp"

using namespace smjls;
namespace fs = std::filesystem;

namespace {

const std::string kScenarioDir = SMJLS_SCENARIO_DIR;
const std::string kCli = SMJLS_CLI_PATH;

std::string scenario(const std::string& name) { return kScenarioDir + "/" + name + ".json"; }

int run_cli(const std::string& args) {
  const std::string cmd = kCli + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WEXITSTATUS(rc);
}

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "smjls_cli_io_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("phase model JSON round-trip preserves the generator and kind") {
  const auto cox = PhaseModel::coxian({-10.0, -5.0, -0.01}, {1.0, 1.0});
  const auto back = phase_model_from_json(phase_model_to_json(cox));
  CHECK(back.kind() == PhaseKind::PH);
  CHECK((back.sub_generator() - cox.sub_generator()).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((back.exit_vector() - cox.exit_vector()).lpNorm<Eigen::Infinity>() == 0.0);

  const auto me = to_me_realization(
      RationalModel::from_polynomials({1.0, 0.0, 1.0}, {1.0, 3.0, 3.0, 1.0}));
  const auto me_back = phase_model_from_json(phase_model_to_json(me));
  CHECK(me_back.kind() == PhaseKind::ME);
  CHECK((me_back.sub_generator() - me.sub_generator()).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("schema violations are rejected with SchemaError") {
  json good = phase_model_to_json(PhaseModel::exponential(2.0));
  json extra = good;
  extra["spurious"] = 1;
  CHECK_THROWS_AS(phase_model_from_json(extra), SchemaError);
  json short_pi = good;
  short_pi["dim"] = 2;
  CHECK_THROWS_AS(phase_model_from_json(short_pi), SchemaError);
  json bad_kind = good;
  bad_kind["kind"] = "coxian";
  CHECK_THROWS_AS(phase_model_from_json(bad_kind), SchemaError);

  json sc = json::parse(slurp(scenario("example1")));
  json unknown = sc;
  unknown["extra_top_level"] = true;
  CHECK_THROWS_AS(parse_scenario(unknown), SchemaError);
  json ragged = sc;
  ragged["modes"][0]["A"] = json::array({json::array({1.0, 2.0}), json::array({3.0})});
  CHECK_THROWS_AS(parse_scenario(ragged), SchemaError);
  json bad_law = sc;
  bad_law["edges"][1]["law"]["type"] = "gamma";
  CHECK_THROWS_AS(parse_scenario(bad_law), SchemaError);
  json bad_gains = sc;
  bad_gains["gains"]["type"] = "adaptive";
  CHECK_THROWS_AS(parse_scenario(bad_gains), SchemaError);

  CHECK_THROWS_AS(load_scenario(kScenarioDir + "/does_not_exist.json"), SchemaError);
}

TEST_CASE("all bundled scenarios parse and carry their references") {
  const auto e1 = load_scenario(scenario("example1"));
  CHECK(e1.name == "example1");
  CHECK(e1.gains.type == GainDirective::Type::Fixed);
  CHECK(e1.reference_cost.value() == 23.08);
  CHECK(e1.surrogate_reference_cost.value() == 166.55);

  const auto e2 = load_scenario(scenario("example2"));
  CHECK(e2.gains.type == GainDirective::Type::Optimal);
  CHECK(e2.reference_cost.value() == 10.60);
  CHECK(e2.surrogate_reference_cost.value() == 28.32);

  const auto me = load_scenario(scenario("me_example"));
  CHECK(me.edge_models[0].realize.has_value());

  const auto wf = load_scenario(scenario("weibull_fit"));
  CHECK(wf.edge_models[0].fit.has_value());
  CHECK(wf.edge_models[0].fit->order == 6);

  const auto ship = load_scenario(scenario("shipengine"));
  CHECK(ship.spec.modes.size() == 8);
  CHECK(ship.spec.edges.size() == 22);
  CHECK(ship.shared_models.size() == 8);
  CHECK(ship.spec.shared.size() == 8);
  ship.spec.check();
}

TEST_CASE("resolving a scenario fills in every holding model") {
  const auto sc = load_scenario(scenario("example1"));
  const auto spec = resolve_spec(sc);
  REQUIRE(spec.edges[0].model.has_value());
  CHECK(spec.edges[0].model->dim() == 3);
  const auto chain = assemble_chain(spec);
  CHECK(chain.phase_count() == 4);

  const auto me = resolve_spec(load_scenario(scenario("me_example")));
  REQUIRE(me.edges[0].model.has_value());
  CHECK(me.edges[0].model->kind() == PhaseKind::ME);
  CHECK(me.edges[0].model->pdf_at(1.0) == Catch::Approx(0.0).margin(1e-10));
}

TEST_CASE("the exponential surrogate preserves every holding mean") {
  const auto spec = resolve_spec(load_scenario(scenario("example1")));
  const auto sur = exponential_surrogate(spec);
  for (size_t e = 0; e < spec.edges.size(); ++e) {
    REQUIRE(sur.edges[e].model.has_value());
    CHECK(sur.edges[e].model->dim() == 1);
    CHECK(sur.edges[e].model->mean() ==
          Catch::Approx(spec.edges[e].model->mean()).epsilon(1e-12));
  }
}

TEST_CASE("cli: solve writes a manifest and artifacts, exit 0") {
  const fs::path dir = temp_dir();
  REQUIRE(run_cli("solve --scenario " + scenario("example1") + " --grid 6000 --out " +
                  dir.string() + " --format both") == 0);
  const json manifest = json::parse(slurp(dir / "example1_cost.json"));
  CHECK(manifest.at("grid_steps") == 6000);
  CHECK(std::abs(manifest.at("cost").at("J").get<double>() - 23.08) < 0.24);
  CHECK(manifest.at("cost").at("forms_agree").get<bool>());
  CHECK(fs::exists(dir / "example1_gains.csv"));
  CHECK(fs::exists(dir / "example1_mu.csv"));
  CHECK(fs::exists(dir / "example1_chain.json"));
  // csv headers
  CHECK(slurp(dir / "example1_gains.csv").rfind("t,cluster,", 0) == 0);
  CHECK(slurp(dir / "example1_mu.csv").rfind("t,mu_0,", 0) == 0);
}

TEST_CASE("cli: validation failures exit 2, numeric failures exit 3") {
  CHECK(run_cli("solve --scenario " + kScenarioDir + "/missing.json") == 2);

  const fs::path dir = temp_dir();
  const fs::path broken = dir / "broken.json";
  std::ofstream(broken) << "{ not json";
  CHECK(run_cli("solve --scenario " + broken.string()) == 2);

  // grid too coarse for the stiff closed loop: integration blows up
  CHECK(run_cli("solve --scenario " + scenario("example1") + " --grid 300") == 3);
}

TEST_CASE("cli: reproduce passes on the bundled references and fails honestly") {
  CHECK(run_cli("reproduce --scenario " + scenario("me_example")) == 0);

  // same scenario with a falsified reference cost must exit 4
  const fs::path dir = temp_dir();
  json sc = json::parse(slurp(scenario("example1")));
  sc["reference_cost"] = 5.0;
  sc["grid"]["steps"] = 6000;
  const fs::path lie = dir / "lie.json";
  std::ofstream(lie) << sc.dump(2);
  CHECK(run_cli("reproduce --scenario " + lie.string()) == 4);
}

TEST_CASE("cli: simulate is deterministic for a fixed seed") {
  const fs::path a = temp_dir() / "mc_a", b = temp_dir() / "mc_b";
  fs::create_directories(a);
  fs::create_directories(b);
  json sc = json::parse(slurp(scenario("example1")));
  sc["grid"]["steps"] = 6000;
  const fs::path small = temp_dir() / "example1_small.json";
  std::ofstream(small) << sc.dump(2);
  REQUIRE(run_cli("simulate --scenario " + small.string() +
                  " --paths 300 --seed 9 --out " + a.string()) == 0);
  REQUIRE(run_cli("simulate --scenario " + small.string() +
                  " --paths 300 --seed 9 --out " + b.string()) == 0);
  CHECK(slurp(a / "example1_mc.json") == slurp(b / "example1_mc.json"));
  const json mc = json::parse(slurp(a / "example1_mc.json"));
  CHECK(mc.at("paths") == 300);
  CHECK(mc.at("three_sigma_pass").get<bool>());
}
