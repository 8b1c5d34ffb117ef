#include <catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <sstream>

#include "jointpo/data_model.hpp"

using namespace jointpo;
using Catch::Matchers::WithinAbs;

namespace {

MultiTrialDataset parse_text(const std::string& text, ParseOptions opts = {}) {
    std::istringstream in(text);
    return parse_dataset(in, opts);
}

MultiTrialDataset random_dataset(std::mt19937_64& rng, int trials, bool surrogate, int k) {
    MultiTrialDataset d;
    d.layout = CellLayout{k, surrogate};
    std::uniform_int_distribution<std::int64_t> count(0, 60);
    for (int g = 0; g < trials; ++g) {
        TrialCellCounts t{"t" + std::to_string(g), std::vector<std::int64_t>(d.layout.size())};
        for (auto& c : t.counts) c = count(rng);
        t.counts[0] += 1;
        t.counts[d.layout.size() / 2] += 1;
        d.trials.push_back(t);
    }
    return d;
}

}  // namespace

TEST_CASE("parse aggregates a surrogate-free trial") {
    const auto d = parse_text("trial,arm,s,y,count\n1,0,NA,0,20\n1,0,NA,1,30\n1,1,NA,0,10\n1,1,NA,1,40\n");
    REQUIRE(d.trial_count() == 1);
    CHECK(d.layout.outcome_levels == 2);
    CHECK_FALSE(d.layout.has_surrogate);
    CHECK(d.trials[0].at(d.layout, 0, 0, 1) == 30);
    CHECK(d.trials[0].at(d.layout, 1, 0, 0) == 10);
}

TEST_CASE("duplicate cell rows are summed") {
    const auto d = parse_text("trial,arm,s,y,count\n1,0,NA,1,10\n1,0,NA,1,5\n1,1,NA,0,1\n");
    CHECK(d.trials[0].at(d.layout, 0, 0, 1) == 15);
}

TEST_CASE("negative count is a validation error") {
    try {
        parse_text("trial,arm,s,y,count\n1,0,NA,1,-3\n");
        FAIL("expected an error");
    } catch (const ParseError&) {
        FAIL("negative counts are validation errors, not parse errors");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.kind()) == "validation");
    }
}

TEST_CASE("malformed rows report the line number") {
    try {
        parse_text("trial,arm,s,y,count\n1,0,NA,1,4\n1,0,NA,x,4\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse_text("trial,arm,y,count\n1,0,1,4\n"), ParseError);
    CHECK_THROWS_AS(parse_text("trial,arm,s,y,count\n1,2,NA,1,4\n"), ParseError);
    CHECK_THROWS_AS(parse_text("trial,arm,s,y,count\n1,0,NA,1\n"), ParseError);
}

TEST_CASE("mixed surrogate presence is a schema error") {
    CHECK_THROWS_AS(parse_text("trial,arm,s,y,count\n1,0,NA,1,4\n1,1,1,1,4\n"), SchemaError);
}

TEST_CASE("BOM and CRLF line endings are accepted") {
    const auto d = parse_text("\xEF\xBB\xBFtrial,arm,s,y,count\r\na,0,1,0,3\r\na,1,0,1,2\r\n");
    CHECK(d.layout.has_surrogate);
    CHECK(d.trials[0].at(d.layout, 0, 1, 0) == 3);
}

TEST_CASE("trial order is first appearance, not lexicographic") {
    const auto d = parse_text("trial,arm,s,y,count\nzeta,0,NA,0,1\nalpha,0,NA,0,1\nzeta,1,NA,1,1\nalpha,1,NA,1,1\n");
    REQUIRE(d.trial_count() == 2);
    CHECK(d.trials[0].label == "zeta");
    CHECK(d.trials[1].label == "alpha");
}

TEST_CASE("outcome cardinality follows the largest label") {
    const auto d = parse_text("trial,arm,s,y,count\n1,0,NA,2,1\n1,1,NA,0,1\n");
    CHECK(d.layout.outcome_levels == 3);
}

TEST_CASE("target trial must be control-only") {
    ParseOptions opts;
    opts.target_label = "0";
    const auto ok = parse_text("trial,arm,s,y,count\n1,0,NA,0,1\n1,1,NA,1,1\n0,0,NA,1,5\n", opts);
    REQUIRE(ok.target.has_value());
    CHECK(ok.target->control_only);
    CHECK(ok.trial_count() == 1);
    CHECK_THROWS_AS(parse_text("trial,arm,s,y,count\n1,0,NA,0,1\n1,1,NA,1,1\n0,1,NA,1,5\n", opts), ValidationError);
}

TEST_CASE("summarize gives conditional frequencies") {
    const auto d = parse_text("trial,arm,s,y,count\n1,0,NA,0,0\n1,0,NA,1,50\n1,1,NA,0,20\n1,1,NA,1,30\n");
    const auto s = summarize(d);
    CHECK(s.trials[0].treated_marginal[0] == 0.4);
    CHECK(s.trials[0].treated_marginal[1] == 0.6);
    CHECK(s.trials[0].control_marginal[0] == 0.0);
    CHECK(s.trials[0].control_marginal[1] == 1.0);
    CHECK(s.trials[0].arm_sizes[0] == 50);
}

TEST_CASE("empty arm names the trial and arm") {
    const auto d = parse_text("trial,arm,s,y,count\nbeta,0,NA,0,3\nbeta,0,NA,1,3\n");
    try {
        summarize(d);
        FAIL("expected an estimation error");
    } catch (const EstimationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("beta") != std::string::npos);
        CHECK(msg.find("arm 1") != std::string::npos);
    }
}

TEST_CASE("composite and surrogate frequencies") {
    const auto d = parse_text("trial,arm,s,y,count\n1,0,0,0,1\n1,0,0,1,2\n1,0,1,0,3\n1,0,1,1,4\n1,1,1,1,5\n");
    const auto s = summarize(d).trials[0];
    CHECK_THAT(s.control_composite[2], WithinAbs(0.3, 1e-15));
    CHECK_THAT(s.control_surrogate[1], WithinAbs(0.7, 1e-15));
    CHECK_THAT(s.control_marginal[1], WithinAbs(0.6, 1e-15));
    CHECK(s.treated_composite[3] == 1.0);
}

TEST_CASE("unit rows aggregate to the same counts") {
    std::vector<UnitRecord> units = {{"a", 0, 1, 0}, {"a", 0, 1, 0}, {"a", 1, 0, 1}, {"b", 1, 1, 1}, {"b", 0, 0, 0}};
    const auto d = aggregate_units(units);
    REQUIRE(d.trial_count() == 2);
    CHECK(d.trials[0].at(d.layout, 0, 1, 0) == 2);
    CHECK(d.trials[1].at(d.layout, 1, 1, 1) == 1);
}

TEST_CASE("summary frequency vectors are probability vectors") {
    std::mt19937_64 rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        const auto d = random_dataset(rng, 4, rep % 2 == 0, 2 + rep % 3);
        for (const auto& t : summarize(d).trials) {
            for (const auto* v : {&t.control_marginal, &t.treated_marginal}) {
                CHECK(std::abs(v->sum() - 1.0) <= 1e-12);
                CHECK(v->minCoeff() >= 0.0);
                CHECK(v->maxCoeff() <= 1.0);
            }
            for (Eigen::Index y = 0; y < t.treated_marginal.size(); ++y) {
                std::int64_t c = 0;
                for (int s = 0; s < d.layout.surrogate_levels(); ++s) c += t.counts[d.layout.index(1, s, static_cast<int>(y))];
                CHECK(t.treated_marginal[y] == static_cast<double>(c) / static_cast<double>(t.arm_sizes[1]));
            }
        }
    }
}

TEST_CASE("round trip through the canonical CSV is exact") {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 30; ++rep) {
        const auto d = random_dataset(rng, 3, rep % 2 == 1, 2 + rep % 2);
        std::stringstream buf;
        write_dataset(buf, d);
        const auto back = parse_dataset(buf, ParseOptions{std::nullopt, d.layout.outcome_levels});
        const auto a = summarize(d), b = summarize(back);
        REQUIRE(a.trials.size() == b.trials.size());
        for (std::size_t g = 0; g < a.trials.size(); ++g) {
            CHECK(a.trials[g].counts == b.trials[g].counts);
            CHECK(a.trials[g].control_marginal == b.trials[g].control_marginal);
            CHECK(a.trials[g].treated_marginal == b.trials[g].treated_marginal);
        }
    }
}

TEST_CASE("scaling every count leaves frequencies bit-identical") {
    std::mt19937_64 rng(13);
    for (int rep = 0; rep < 30; ++rep) {
        auto d = random_dataset(rng, 3, true, 2);
        const auto before = summarize(d);
        const std::int64_t c = 1 + rep * 7;
        for (auto& t : d.trials)
            for (auto& x : t.counts) x *= c;
        const auto after = summarize(d);
        for (std::size_t g = 0; g < before.trials.size(); ++g) {
            CHECK(before.trials[g].control_composite == after.trials[g].control_composite);
            CHECK(before.trials[g].treated_composite == after.trials[g].treated_composite);
            CHECK(before.trials[g].treated_marginal == after.trials[g].treated_marginal);
            CHECK(before.trials[g].control_surrogate == after.trials[g].control_surrogate);
        }
    }
}

TEST_CASE("permuting trials permutes summaries") {
    std::mt19937_64 rng(17);
    auto d = random_dataset(rng, 5, false, 2);
    const auto base = summarize(d);
    std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    MultiTrialDataset shuffled = d;
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled.trials[i] = d.trials[perm[i]];
    const auto moved = summarize(shuffled);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        CHECK(moved.trials[i].label == base.trials[perm[i]].label);
        CHECK(moved.trials[i].treated_marginal == base.trials[perm[i]].treated_marginal);
    }
}
