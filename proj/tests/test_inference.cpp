#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "jointpo/inference.hpp"
#include "jointpo/simbench.hpp"

using namespace jointpo;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Upper tail of chi-square with even df: exp(-x/2) * sum_{j < df/2} (x/2)^j / j!.
double poisson_tail(double x, int df) {
    const double h = x / 2.0;
    double term = std::exp(-h), sum = 0.0;
    for (int j = 0; j < df / 2; ++j) {
        sum += term;
        term *= h / (j + 1);
    }
    return sum;
}

// Regularized upper incomplete gamma by series (x < a + 1) or a modified
// Lentz continued fraction, using only std::lgamma.
double upper_gamma(double a, double x) {
    if (x <= 0.0) return 1.0;
    const double log_prefix = a * std::log(x) - x - std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a, del = 1.0 / a, sum = del;
        for (int n = 0; n < 100000; ++n) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-17) break;
        }
        return 1.0 - sum * std::exp(log_prefix);
    }
    const double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i < 100000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-17) break;
    }
    return std::exp(log_prefix) * h;
}

MultiTrialDataset binary_dataset(const std::vector<std::array<std::int64_t, 4>>& rows) {
    MultiTrialDataset d;
    d.layout = CellLayout{2, false};
    for (std::size_t g = 0; g < rows.size(); ++g)
        d.trials.push_back({std::to_string(g + 1), {rows[g][0], rows[g][1], rows[g][2], rows[g][3]}});
    return d;
}

Estimator outcome_theta() {
    return [](const MultiTrialDataset& d) {
        const auto t = solve_transitions(build_system(summarize(d), StateSpace::outcome));
        Eigen::VectorXd v(2);
        v << t.probs(0, 1), t.probs(1, 1);
        return v;
    };
}

}  // namespace

TEST_CASE("chi-square tail reproduces reference J-test p values") {
    CHECK(std::round(chi_square_sf(4.190, 8) * 1000) == 840);
    CHECK(std::round(chi_square_sf(8.793, 8) * 1000) == 360);
    CHECK_THAT(chi_square_sf(4.190, 8), WithinAbs(poisson_tail(4.190, 8), 1e-12));
    CHECK_THAT(chi_square_sf(8.793, 8), WithinAbs(poisson_tail(8.793, 8), 1e-12));
}

TEST_CASE("chi-square tail agrees with independent oracles") {
    const std::vector<std::pair<double, int>> pairs = {
        {0.1, 1}, {0.5, 1}, {3.84, 1}, {10.0, 1}, {1.0, 2}, {5.99, 2}, {0.3, 3}, {7.81, 3}, {2.0, 4}, {9.49, 4},
        {4.0, 5}, {11.07, 5}, {15.0, 6}, {1.5, 7}, {14.07, 7}, {4.19, 8}, {8.793, 8}, {20.0, 9}, {3.0, 10}, {40.0, 12}};
    for (const auto& [x, df] : pairs) {
        const double p = chi_square_sf(x, df);
        CHECK_THAT(p, WithinAbs(upper_gamma(df / 2.0, x / 2.0), 1e-8));
        if (df % 2 == 0) CHECK_THAT(p, WithinAbs(poisson_tail(x, df), 1e-8));
    }
}

TEST_CASE("chi-square tail is 1 at zero and decreasing") {
    for (int df = 1; df <= 12; ++df) {
        CHECK(chi_square_sf(0.0, df) == 1.0);
        double prev = 1.0;
        for (double x = 0.25; x < 40.0; x += 0.25) {
            const double p = chi_square_sf(x, df);
            CHECK(p <= prev);
            prev = p;
        }
    }
}

TEST_CASE("bootstrap is deterministic and independent of worker count") {
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}, {55, 45, 50, 50}});
    BootstrapConfig cfg;
    cfg.replicates = 200;
    cfg.seed = 123;
    const auto a = bootstrap(d, outcome_theta(), cfg);
    const auto b = bootstrap(d, outcome_theta(), cfg);
    cfg.workers = 4;
    const auto c = bootstrap(d, outcome_theta(), cfg);
    CHECK(a.replicates.cwiseEqual(b.replicates).all());
    CHECK(a.replicates.cwiseEqual(c.replicates).all());
    CHECK(a.estimate.se == c.estimate.se);
    CHECK(a.estimate.se.minCoeff() > 0.0);
    cfg.seed = 124;
    const auto other = bootstrap(d, outcome_theta(), cfg);
    CHECK_FALSE(a.replicates.cwiseEqual(other.replicates).all());
}

TEST_CASE("normal and percentile intervals") {
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}, {55, 45, 50, 50}});
    BootstrapConfig cfg;
    cfg.replicates = 300;
    cfg.seed = 9;
    const auto n = bootstrap(d, outcome_theta(), cfg);
    const double z = normal_quantile(0.975);
    for (Eigen::Index j = 0; j < 2; ++j) {
        CHECK_THAT(n.estimate.ci[j].lower, WithinAbs(n.estimate.point[j] - z * n.estimate.se[j], 1e-15));
        CHECK_THAT(n.estimate.ci[j].upper, WithinAbs(n.estimate.point[j] + z * n.estimate.se[j], 1e-15));
    }
    cfg.ci_method = CiMethod::percentile;
    const auto p = bootstrap(d, outcome_theta(), cfg);
    for (Eigen::Index j = 0; j < 2; ++j) {
        CHECK(p.estimate.ci[j].lower < p.estimate.ci[j].upper);
        CHECK(p.estimate.se[j] == n.estimate.se[j]);
    }
}

TEST_CASE("bootstrap redraws replicates whose estimator fails") {
    // Trial 3 has a single treated unit, so resamples often empty that arm.
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}, {10, 9, 0, 1}});
    BootstrapConfig cfg;
    cfg.replicates = 100;
    cfg.seed = 5;
    const auto ok = bootstrap(d, outcome_theta(), cfg);
    CHECK(ok.redraws > 0);
    CHECK(ok.failures == 0);

    cfg.max_attempts = 1;
    CHECK_THROWS_AS(bootstrap(d, outcome_theta(), cfg), InferenceError);
    cfg.max_failure_fraction = 1.0;
    const auto counted = bootstrap(d, outcome_theta(), cfg);
    CHECK(counted.failures > 10);
    int flagged = 0;
    for (std::size_t r = 0; r < counted.failed.size(); ++r) {
        if (!counted.failed[r]) continue;
        ++flagged;
        CHECK(std::isnan(counted.replicates(static_cast<Eigen::Index>(r), 0)));
    }
    CHECK(flagged == counted.failures);
}

TEST_CASE("bootstrap config validation") {
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}});
    BootstrapConfig cfg;
    cfg.replicates = 1;
    CHECK_THROWS_AS(bootstrap(d, outcome_theta(), cfg), ValidationError);
}

TEST_CASE("plug-in variance vanishes on deterministic cells") {
    // Identical balanced trials would make C singular, so use trials that
    // are all-0 and all-1 in both arms: Y1 = Y0 exactly, no sampling noise.
    const auto d = binary_dataset({{50, 0, 50, 0}, {0, 50, 0, 50}});
    const auto s = summarize(d);
    const auto v = plugin_variance(s, Eigen::Vector2d(0.0, 1.0));
    CHECK(v.se[0] == 0.0);
    CHECK(v.se[1] == 0.0);
}

TEST_CASE("plug-in variance scales as one over root n") {
    auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}, {55, 45, 50, 50}, {20, 80, 30, 70}});
    const auto s = summarize(d);
    const auto t = solve_transitions(build_system(s, StateSpace::outcome));
    const Eigen::Vector2d theta(t.probs(0, 1), t.probs(1, 1));
    const auto base = plugin_variance(s, theta);
    for (auto& tr : d.trials)
        for (auto& c : tr.counts) c *= 2;
    const auto doubled = plugin_variance(summarize(d), theta);
    for (int j = 0; j < 2; ++j) CHECK_THAT(doubled.se[j], WithinAbs(base.se[j] / std::sqrt(2.0), 1e-10));
}

TEST_CASE("plug-in SE tracks the Monte Carlo SD on C1") {
    DgpSpec spec;
    spec.kind = DgpCase::c1;
    spec.units_per_trial = 500;
    const int reps = 400;
    std::vector<double> est0, se0;
    for (int r = 0; r < reps; ++r) {
        const auto data = simulate_dataset(spec, derive_seed(77, 1, static_cast<std::uint64_t>(r)));
        const auto s = summarize(data);
        const auto t = solve_transitions(build_system(s, StateSpace::outcome));
        const Eigen::Vector2d theta(t.probs(0, 1), t.probs(1, 1));
        est0.push_back(theta[0]);
        se0.push_back(plugin_variance(s, theta).se[0]);
    }
    double mean = 0, ss = 0, mean_se = 0;
    for (double v : est0) mean += v / reps;
    for (double v : est0) ss += (v - mean) * (v - mean);
    for (double v : se0) mean_se += v / reps;
    const double sd = std::sqrt(ss / (reps - 1));
    CHECK(std::abs(mean_se - sd) / sd < 0.15);
}

TEST_CASE("just-identified systems have zero J and no p-value") {
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}});
    const auto sys = build_system(summarize(d), StateSpace::outcome);
    const auto fit = solve_transitions(sys);
    const std::vector<double> sigma = {0.05, 0.05};
    const auto test = overid_test(sys, fit.probs, sigma, 1);
    CHECK(test.statistic <= 1e-10);
    CHECK(test.df == 0);
    CHECK(test.just_identified());
    CHECK_FALSE(test.p_value.has_value());
}

TEST_CASE("J is reproducible from the residual table") {
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}, {55, 45, 50, 50}, {20, 80, 30, 70}});
    BootstrapConfig cfg;
    cfg.replicates = 200;
    cfg.seed = 31;
    const auto run = run_overid_test(d, TransitionPipeline{}, cfg);
    CHECK(run.test.df == 2);
    double j = 0.0;
    for (const auto& r : run.test.residuals) j += r.residual * r.residual / (r.sigma * r.sigma);
    CHECK_THAT(run.test.statistic, WithinAbs(j, 1e-12));
    REQUIRE(run.test.p_value.has_value());
    CHECK_THAT(*run.test.p_value, WithinAbs(chi_square_sf(run.test.statistic, 2), 1e-15));
}

TEST_CASE("zero residual SE is a test error") {
    const auto d = binary_dataset({{40, 60, 35, 65}, {70, 30, 55, 45}, {55, 45, 50, 50}});
    const auto sys = build_system(summarize(d), StateSpace::outcome);
    const auto fit = solve_transitions(sys);
    const std::vector<double> sigma = {0.05, 0.0, 0.05};
    CHECK_THROWS_AS(overid_test(sys, fit.probs, sigma, 1), InferenceError);
}

TEST_CASE("J rejects more often when one trial's transition moves") {
    DgpSpec null_spec;
    null_spec.kind = DgpCase::c1;
    null_spec.units_per_trial = 500;
    DgpSpec alt_spec = null_spec;
    alt_spec.kind = DgpCase::custom;
    auto pop = dgp_population(null_spec);
    {
        const double theta0 = pop.truth[0], theta1 = pop.truth[1] + 0.3;
        const double p = pop.control_cells[9][1];
        const double t1 = (1 - p) * theta0 + p * theta1;
        pop.treated_cells[9] << 1 - t1, t1;
    }
    alt_spec.custom = pop;
    BootstrapConfig cfg;
    cfg.replicates = 100;
    const int reps = 150;
    int null_rejects = 0, alt_rejects = 0;
    for (int r = 0; r < reps; ++r) {
        cfg.seed = derive_seed(2, 7, static_cast<std::uint64_t>(r));
        const auto seed = derive_seed(2, 8, static_cast<std::uint64_t>(r));
        if (*run_overid_test(simulate_dataset(null_spec, seed), {}, cfg).test.p_value < 0.05) ++null_rejects;
        if (*run_overid_test(simulate_dataset(alt_spec, seed), {}, cfg).test.p_value < 0.05) ++alt_rejects;
    }
    CHECK(alt_rejects > null_rejects);
    CHECK(alt_rejects > reps / 4);
}
