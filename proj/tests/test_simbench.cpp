#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "jointpo/simbench.hpp"

using namespace jointpo;
using Catch::Matchers::WithinAbs;

namespace {

double round3(double x) { return std::round(x * 1000.0) / 1000.0; }

}  // namespace

TEST_CASE("binary design truths") {
    DgpSpec spec;
    spec.kind = DgpCase::c1;
    const auto c1 = dgp_population(spec);
    CHECK(round3(c1.truth[0]) == 0.378);
    CHECK(round3(c1.truth[1]) == 0.622);
    spec.kind = DgpCase::c2;
    const auto c2 = dgp_population(spec);
    CHECK(round3(c2.truth[0]) == 0.622);
    CHECK(round3(c2.truth[1]) == 0.818);
    CHECK_THAT(c1.control_cells[0][1], WithinAbs(0.5, 1e-15));
    CHECK_THAT(c1.control_cells[9][1], WithinAbs(0.8, 1e-15));
}

TEST_CASE("stratum design truths and monotone strata") {
    DgpSpec spec;
    spec.kind = DgpCase::c4;
    const auto pop = dgp_population(spec);
    REQUIRE(pop.truth.size() == 9);
    CHECK(std::round(pop.truth[6] * 1e4) == 2449);
    CHECK(std::round(pop.truth[7] * 1e4) == 2311);
    CHECK(std::round(pop.truth[8] * 1e4) == 1951);
    for (const auto& latent : pop.latent) {
        CHECK(std::abs(latent.sum() - 1.0) <= 1e-12);
        for (int c = 0; c < 2; ++c)
            for (int d = 0; d < 2; ++d) CHECK(latent[FourWayJoint::cell_index(1, 0, c, d)] == 0.0);
    }
    // Folding S0 = 1, S1 = 0 into stratum 00 keeps P(S1 = 1) at 0.5 + (g-1)/30.
    for (int g = 0; g < 10; ++g) {
        const auto& t = pop.treated_cells[static_cast<std::size_t>(g)];
        CHECK_THAT(t[2] + t[3], WithinAbs(0.5 + g / 30.0, 1e-12));
    }
}

TEST_CASE("populations are valid probability laws") {
    for (auto kind : {DgpCase::c1, DgpCase::c2, DgpCase::c3, DgpCase::c4}) {
        DgpSpec spec;
        spec.kind = kind;
        const auto pop = dgp_population(spec);
        for (std::size_t g = 0; g < pop.trials(); ++g) {
            CHECK(std::abs(pop.control_cells[g].sum() - 1.0) <= 1e-12);
            CHECK(std::abs(pop.treated_cells[g].sum() - 1.0) <= 1e-12);
            CHECK(pop.control_cells[g].minCoeff() >= 0.0);
            CHECK(std::abs(pop.latent[g].sum() - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("custom populations are checked") {
    DgpSpec spec;
    spec.kind = DgpCase::custom;
    CHECK_THROWS_AS(dgp_population(spec), ValidationError);
    DgpSpec base;
    auto pop = dgp_population(base);
    pop.treated_cells[0][0] = 0.9;
    spec.custom = pop;
    CHECK_THROWS_AS(dgp_population(spec), ValidationError);
    CHECK_THROWS_AS(parse_case("c9"), ValidationError);
}

TEST_CASE("simulation is deterministic per seed") {
    DgpSpec spec;
    spec.kind = DgpCase::c3;
    spec.units_per_trial = 200;
    const auto a = simulate_dataset(spec, 42);
    const auto b = simulate_dataset(spec, 42);
    const auto c = simulate_dataset(spec, 43);
    bool differs = false;
    for (std::size_t g = 0; g < a.trials.size(); ++g) {
        CHECK(a.trials[g].counts == b.trials[g].counts);
        CHECK(a.trials[g].total() == 200);
        differs = differs || a.trials[g].counts != c.trials[g].counts;
    }
    CHECK(differs);
}

TEST_CASE("zero units per trial is rejected") {
    DgpSpec spec;
    spec.units_per_trial = 0;
    CHECK_THROWS_AS(simulate_dataset(spec, 1), ValidationError);
}

TEST_CASE("large samples match the population law") {
    DgpSpec spec;
    spec.units_per_trial = 1'000'000;
    const auto s = summarize(simulate_dataset(spec, 2024));
    CHECK_THAT(s.trials[0].control_marginal[1], WithinAbs(0.5, 0.002));
    CHECK_THAT(s.trials[9].control_marginal[1], WithinAbs(0.8, 0.002));
}

TEST_CASE("a constant estimator at the truth has zero bias and full coverage") {
    StudyConfig cfg;
    cfg.spec.kind = DgpCase::c1;
    cfg.spec.units_per_trial = 100;
    cfg.replicates = 20;
    cfg.bootstrap_replicates = 10;
    cfg.seed = 3;
    const auto truth = dgp_population(cfg.spec).truth;
    const auto study = run_study(cfg, [truth](const MultiTrialDataset&) { return Eigen::VectorXd(truth); });
    for (const auto& m : study.metrics) {
        CHECK(m.bias == 0.0);
        CHECK(m.sd == 0.0);
        CHECK(m.ese == 0.0);
        CHECK(m.cp95 == 1.0);
    }
}

TEST_CASE("metrics recompute bit for bit from the persisted replicate CSV") {
    StudyConfig cfg;
    cfg.spec.kind = DgpCase::c4;
    cfg.spec.units_per_trial = 200;
    cfg.replicates = 30;
    cfg.bootstrap_replicates = 20;
    cfg.seed = 77;
    const auto study = run_study(cfg);
    std::stringstream csv;
    write_replicate_csv(csv, study);
    const auto table = read_replicate_csv(csv);
    CHECK(table.parameter_names == study.parameter_names);
    const auto again = metrics_from_replicates(table.parameter_names, study.truth, table.estimates, table.std_errors,
                                               table.failed);
    REQUIRE(again.size() == study.metrics.size());
    for (std::size_t j = 0; j < again.size(); ++j) {
        CHECK(again[j].bias == study.metrics[j].bias);
        CHECK(again[j].sd == study.metrics[j].sd);
        CHECK(again[j].ese == study.metrics[j].ese);
        CHECK(again[j].cp95 == study.metrics[j].cp95);
    }
}

TEST_CASE("studies do not depend on the worker count") {
    StudyConfig cfg;
    cfg.spec.kind = DgpCase::c2;
    cfg.spec.units_per_trial = 100;
    cfg.replicates = 24;
    cfg.bootstrap_replicates = 20;
    cfg.seed = 5;
    const auto one = run_study(cfg);
    cfg.workers = 3;
    const auto three = run_study(cfg);
    CHECK(one.estimates.cwiseEqual(three.estimates).all());
    CHECK(one.std_errors.cwiseEqual(three.std_errors).all());
}

TEST_CASE("bias shrinks and SD falls as trials grow") {
    StudyConfig cfg;
    cfg.spec.kind = DgpCase::c1;
    cfg.replicates = 300;
    cfg.bootstrap_replicates = 10;
    cfg.seed = 11;
    std::vector<StudyResult> studies;
    for (std::int64_t n : {100, 200, 500}) {
        cfg.spec.units_per_trial = n;
        studies.push_back(run_study(cfg));
    }
    for (std::size_t j = 0; j < 2; ++j) {
        CHECK(std::abs(studies[2].metrics[j].bias) <= std::abs(studies[0].metrics[j].bias) + 0.01);
        CHECK(studies[1].metrics[j].sd < studies[0].metrics[j].sd);
        CHECK(studies[2].metrics[j].sd < studies[1].metrics[j].sd);
    }
    const auto text = format_study_table(studies);
    CHECK(text.find("P(Y1=1|Y0=0)") != std::string::npos);
    CHECK(text.find("n_g = 500") != std::string::npos);
}

TEST_CASE("study configs parse from key-value text") {
    std::istringstream in("# table 2 block\ncase = c2\nng = 200\nreps = 50\nboot = 20\nseed = 9\ntrials = 8\n");
    const auto cfg = parse_study_config(in);
    CHECK(cfg.spec.kind == DgpCase::c2);
    CHECK(cfg.spec.units_per_trial == 200);
    CHECK(cfg.replicates == 50);
    CHECK(cfg.bootstrap_replicates == 20);
    CHECK(cfg.seed == 9);
    CHECK(cfg.spec.trials == 8);
    std::istringstream bad("case = c1\ncolour = red\n");
    try {
        parse_study_config(bad);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("a single replicate is not a study") {
    StudyConfig cfg;
    cfg.replicates = 1;
    CHECK_THROWS_AS(run_study(cfg), ValidationError);
}
