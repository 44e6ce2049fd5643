#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"

#include "balancekit/cli/analysis.hpp"
#include "balancekit/simulation.hpp"

using namespace balancekit;
using namespace balancekit::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("bk_unit_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// One simulated evaluation dataset: outcomes do not depend on treatment.
fs::path effect_free_csv(const fs::path& dir, std::uint64_t seed) {
    SimulationSpec spec;
    spec.n_units = 4000;
    spec.d_continuous = 6;
    spec.d_binary = 2;
    spec.seed = seed;
    const auto fit = fit_reference(spec);
    const Dataset ds = replication_dataset(spec, fit, 0, 2000);
    const fs::path csv = dir / "panel.csv";
    std::ofstream out(csv, std::ios::binary);
    export_csv(ds, out, SchemaConfig{"unit_id", "treatment", {}, {}, ','});
    return csv;
}

}  // namespace

TEST_CASE("analysis: effect-free data passes and the validation interval covers 0") {
    const fs::path dir = scratch("analysis_ok");
    AnalysisConfig cfg;
    cfg.data = effect_free_csv(dir, 5);
    cfg.outcomes = {"active_days", "app_opens"};
    cfg.validation_outcomes = {"time_spent"};
    cfg.bootstrap = 100;
    cfg.report = dir / "report.json";
    const auto out = run_analysis(cfg);
    CHECK(out.exit_code == kExitOk);
    CHECK(out.report["status"] == "ok");
    CHECK(out.report["validation"]["passed"] == true);
    REQUIRE(out.report["validation"]["metrics"].size() == 1);
    CHECK(out.report["validation"]["metrics"][0]["covers_zero"] == true);
    CHECK(out.report["summary"].size() == 2);
    CHECK(fs::exists(cfg.report));
    CHECK(fs::exists(dir / "report.csv"));
    for (const auto& e : out.report["estimates"]) {
        CHECK(e["ci_lower"].get<double>() <= e["patt"].get<double>());
        CHECK(e["patt"].get<double>() <= e["ci_upper"].get<double>());
    }
}

TEST_CASE("analysis: a covariate the controls cannot match exits 2 and is named") {
    const fs::path dir = scratch("analysis_infeasible");
    {
        std::ofstream out(dir / "panel.csv");
        out << "unit_id,treatment,age,spend,y\n";
        std::mt19937_64 rng(1);
        std::normal_distribution<double> nd;
        for (int i = 0; i < 300; ++i) {
            const int t = i % 3 == 0;
            out << "u" << i << ',' << t << ',' << format_double(30 + 5 * nd(rng)) << ','
                << format_double(t ? 100 + nd(rng) : 10 + nd(rng)) << ',' << format_double(nd(rng)) << "\n";
        }
    }
    AnalysisConfig cfg;
    cfg.data = dir / "panel.csv";
    cfg.outcomes = {"y"};
    cfg.bootstrap = 0;
    cfg.solver.max_iterations = 2000;
    cfg.report = dir / "report.json";
    const auto out = run_analysis(cfg);
    CHECK(out.exit_code == kExitBalance);
    CHECK(out.report["status"] == "balance_check_failed");
    const auto failing = out.report["balance"]["failing_covariates"];
    REQUIRE(failing.size() == 1);
    CHECK(failing[0] == "spend");
}

TEST_CASE("analysis: a missing data file exits nonzero and names the path") {
    const fs::path dir = scratch("analysis_missing");
    AnalysisConfig cfg;
    cfg.data = dir / "nope.csv";
    cfg.outcomes = {"y"};
    cfg.report = dir / "report.json";
    const auto out = run_analysis(cfg);
    CHECK(out.exit_code != 0);
    CHECK(out.report["status"] == "error");
    const std::string msg = out.report["error"]["message"];
    CHECK(msg.find("nope.csv") != std::string::npos);
    CHECK(fs::exists(cfg.report));
}
