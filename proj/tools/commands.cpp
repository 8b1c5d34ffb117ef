#include "commands.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <regex>
#include <sstream>

#include "CLI11.hpp"
#include "jointpo/simbench.hpp"
#include "report.hpp"

namespace jointpo::cli {

namespace {

namespace fs = std::filesystem;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Options {
    std::string input;
    std::string space = "outcome";
    bool mono_s = false;
    bool mono_y = false;
    bool project = false;
    bool force = false;
    bool weighted = false;
    bool clip = false;
    bool table = false;
    bool timing = false;
    int boot = 0;
    std::uint64_t seed = 0;
    double ci = 0.95;
    std::string ci_method = "normal";
    std::string target = "0";
    int method = 1;
    int column = -1;
    std::string residual_scale = "fixed_theta";
    int favorable = 1;
    std::string dgp_case;
    std::vector<std::int64_t> ng;
    int reps = 1000;
    int trials = 10;
    double treatment_prob = 0.5;
    std::string config;
    std::string output;
    std::string replicates_csv;
    std::string plot_data;
    int threads = 1;
};

struct Output {
    Json results;
    Json diagnostics = Json::object();
    std::optional<std::string> digest;
    std::string text;  ///< replaces the JSON on stdout when non-empty
};

/// What a command needs from the parser: its name, the parsed values and which flags were given.
struct Invocation {
    std::string name;
    const Options& o;
    const CLI::App& app;

    bool given(const std::string& flag) const { return app.count(flag) > 0; }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write '" + path.string() + "'");
    return out;
}

StateSpace parse_space(const std::string& name) {
    if (name == "outcome") return StateSpace::outcome;
    if (name == "surrogate") return StateSpace::surrogate;
    if (name == "composite") return StateSpace::composite;
    throw ValidationError("unknown state space '" + name + "' (expected outcome, surrogate or composite)");
}

struct Loaded {
    MultiTrialDataset data;
    std::string digest;
};

Loaded load_input(const Invocation& inv, bool with_target) {
    if (inv.o.input.empty()) throw ValidationError("--input is required");
    const auto bytes = read_file(inv.o.input);
    ParseOptions options;
    if (with_target) options.target_label = inv.o.target;
    std::istringstream in(bytes);
    return {parse_dataset(in, options), "sha256:" + sha256_hex(bytes)};
}

void require_seed(const Invocation& inv, const std::string& why) {
    if (!inv.given("--seed")) throw ValidationError("--seed is required " + why);
}

BootstrapConfig boot_config(const Invocation& inv, int replicates) {
    BootstrapConfig cfg;
    cfg.replicates = replicates;
    cfg.seed = inv.o.seed;
    cfg.ci_level = inv.o.ci;
    cfg.workers = inv.o.threads;
    if (inv.o.ci_method == "normal")
        cfg.ci_method = CiMethod::normal;
    else if (inv.o.ci_method == "percentile")
        cfg.ci_method = CiMethod::percentile;
    else
        throw ValidationError("unknown --ci-method '" + inv.o.ci_method + "' (expected normal or percentile)");
    return cfg;
}

TransitionPipeline make_pipeline(const Invocation& inv, const CellLayout& layout) {
    TransitionPipeline p;
    p.space = parse_space(inv.o.space);
    if (p.space == StateSpace::outcome && inv.o.mono_s)
        throw ValidationError("--mono-s constrains the surrogate and needs --space surrogate or composite");
    if (p.space == StateSpace::surrogate && inv.o.mono_y)
        throw ValidationError("--mono-y constrains the outcome and needs --space outcome or composite");
    if (p.space != StateSpace::outcome && !layout.has_surrogate)
        throw ValidationError(std::string("--space ") + to_string(p.space) + " needs a surrogate column in the input");
    p.monotonicity = {inv.o.mono_s, inv.o.mono_y};
    p.solve.project_simplex = inv.o.project;
    p.solve.force = inv.o.force;
    p.weighted = inv.o.weighted;
    return p;
}

Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
    Eigen::VectorXd v(m.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) v[i * m.cols() + j] = m(i, j);
    return v;
}

Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[offset + i * cols + j];
    return m;
}

double value_or_nan(const std::optional<double>& v) { return v ? *v : kNaN; }

Json interval_block(const VarianceEstimate& var, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd lo(rows, cols), hi(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            const auto& ci = var.ci[static_cast<std::size_t>(offset + i * cols + j)];
            lo(i, j) = ci.lower;
            hi(i, j) = ci.upper;
        }
    Json out;
    out["se"] = to_json(unflatten(var.se, offset, rows, cols));
    out["ci_lower"] = to_json(lo);
    out["ci_upper"] = to_json(hi);
    return out;
}

Json bootstrap_summary(const BootstrapResult& boot, const BootstrapConfig& cfg) {
    Json out;
    out["replicates"] = cfg.replicates;
    out["failures"] = boot.failures;
    out["redraws"] = boot.redraws;
    out["ci_level"] = cfg.ci_level;
    out["ci_method"] = to_string(cfg.ci_method);
    return out;
}

Json transition_json(const TransitionMatrix& t) {
    Json out;
    out["states"] = t.state_labels;
    out["matrix"] = to_json(t.probs);
    out["support"] = to_json(t.support);
    out["identified"] = t.identified;
    out["projected"] = t.projected;
    out["max_row_sum_error"] = t.max_row_sum_error;
    return out;
}

const Eigen::VectorXd& control_in_space(const TrialSummary& t, StateSpace space) {
    switch (space) {
        case StateSpace::surrogate: return t.control_surrogate;
        case StateSpace::composite: return t.control_composite;
        case StateSpace::outcome: break;
    }
    return t.control_marginal;
}

const Eigen::VectorXd& treated_in_space(const TrialSummary& t, StateSpace space) {
    switch (space) {
        case StateSpace::surrogate: return t.treated_surrogate;
        case StateSpace::composite: return t.treated_composite;
        case StateSpace::outcome: break;
    }
    return t.treated_marginal;
}

/// Mean outcome level (or P(S = 1) on the surrogate space) of a state distribution.
double mean_level(const Eigen::VectorXd& p, StateSpace space, int outcome_levels) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const auto level = space == StateSpace::composite ? i % outcome_levels : i;
        mean += static_cast<double>(level) * p[i];
    }
    return mean;
}

std::string tsv_number(double x) {
    if (!std::isfinite(x)) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void write_linearity(const fs::path& dir, const DesignSystem& sys, const Eigen::MatrixXd& probs, int target,
                     const std::vector<double>& sigma) {
    auto out = open_output(dir / "linearity.tsv");
    out << "trial";
    for (const auto& s : sys.state_labels) out << "\tcontrol_" << s;
    out << "\ttreated\tfitted\tresidual\tsigma\n";
    const Eigen::VectorXd fitted = sys.design * probs.col(target);
    for (Eigen::Index g = 0; g < sys.trials(); ++g) {
        out << sys.trial_labels[static_cast<std::size_t>(g)];
        for (Eigen::Index i = 0; i < sys.states(); ++i) out << '\t' << tsv_number(sys.design(g, i));
        const double treated = sys.response(g, target);
        out << '\t' << tsv_number(treated) << '\t' << tsv_number(fitted[g]) << '\t'
            << tsv_number(treated - fitted[g]) << '\t'
            << tsv_number(sigma.empty() ? kNaN : sigma[static_cast<std::size_t>(g)]) << '\n';
    }
}

void write_ate(const fs::path& dir, const SummaryFrequencies& s, StateSpace space) {
    auto out = open_output(dir / "ate.tsv");
    out << "trial\tcontrol_mean\ttreated_mean\tdifference\n";
    for (const auto& t : s.trials) {
        const double c = mean_level(control_in_space(t, space), space, s.layout.outcome_levels);
        const double a = mean_level(treated_in_space(t, space), space, s.layout.outcome_levels);
        out << t.label << '\t' << tsv_number(c) << '\t' << tsv_number(a) << '\t' << tsv_number(a - c) << '\n';
    }
}

// ---------------------------------------------------------------- estimate

Output cmd_estimate(const Invocation& inv) {
    const auto& o = inv.o;
    auto [data, digest] = load_input(inv, false);
    const auto summaries = summarize(data);
    const auto pipeline = make_pipeline(inv, data.layout);
    const auto sys = pipeline.system(summaries);
    const auto fit = solve_transitions(sys, pipeline.solve);
    const bool binary = sys.states() == 2;

    Output out;
    out.digest = digest;
    out.results["space"] = to_string(pipeline.space);
    out.results["monotonicity"] = monotonicity_label(pipeline.monotonicity);
    out.results["weighted"] = pipeline.weighted;
    out.results["transition"] = transition_json(fit);
    const auto table = joint_table(fit, sys);
    Json joints = Json::array();
    for (std::size_t g = 0; g < table.joints.size(); ++g) {
        Json j;
        j["trial"] = table.trial_labels[g];
        j["joint"] = to_json(table.joints[g]);
        if (binary) j["derived"] = to_json(derived_estimands(table.joints[g], o.favorable));
        joints.push_back(std::move(j));
    }
    out.results["joints"] = std::move(joints);
    out.diagnostics["rank"] = to_json(fit.diagnostics);
    out.diagnostics["warnings"] = fit.warnings;
    if (table.has_negative)
        out.diagnostics["warnings"].push_back("some joint cells are negative; rerun with --project to constrain rows");

    Json inference = Json::object();
    if (o.boot > 0) {
        require_seed(inv, "when --boot is positive");
        const auto cfg = boot_config(inv, o.boot);
        const auto k = sys.states();
        Estimator estimator = [&pipeline](const MultiTrialDataset& d) { return flatten(pipeline(summarize(d)).probs); };
        const auto boot = bootstrap(data, estimator, cfg);
        Json b = bootstrap_summary(boot, cfg);
        b["transition"] = interval_block(boot.estimate, 0, k, k);
        inference["bootstrap"] = std::move(b);
    }
    const bool plain = !pipeline.monotonicity.any() && !pipeline.weighted && !fit.projected;
    if (binary && plain && pipeline.space != StateSpace::composite) {
        const Eigen::Vector2d theta(fit.probs(0, 1), fit.probs(1, 1));
        const auto var = plugin_variance(summaries, theta, pipeline.space, o.ci);
        Json p = to_json(var);
        p["parameters"] = {"P(1|0)", "P(1|1)"};
        inference["plugin"] = std::move(p);
    }
    out.results["inference"] = std::move(inference);

    if (!o.plot_data.empty()) {
        write_linearity(o.plot_data, sys, fit.probs, static_cast<int>(sys.states()) - 1, {});
        write_ate(o.plot_data, summaries, pipeline.space);
    }
    return out;
}

// ---------------------------------------------------------------- test

Output cmd_test(const Invocation& inv) {
    const auto& o = inv.o;
    require_seed(inv, "for the bootstrap behind the test");
    auto [data, digest] = load_input(inv, false);
    const auto summaries = summarize(data);
    const auto pipeline = make_pipeline(inv, data.layout);
    const auto sys = pipeline.system(summaries);
    const auto k = sys.states();
    const auto m = sys.trials();
    const int column = o.column < 0 ? static_cast<int>(k) - 1 : o.column;
    if (column >= k) throw ValidationError("--column must be below the number of states (" + std::to_string(k) + ")");
    int free = 0;
    for (Eigen::Index i = 0; i < k; ++i)
        if (sys.support(i, column)) ++free;
    if (m <= free)
        throw IdentificationError("just-identified: m = " + std::to_string(m) + " trials and " + std::to_string(free) +
                                  " free transition parameters in the tested column leave no degrees of freedom "
                                  "(needs m > " + std::to_string(free) + ")");
    ResidualScale scale;
    if (o.residual_scale == "fixed_theta")
        scale = ResidualScale::fixed_theta;
    else if (o.residual_scale == "refit")
        scale = ResidualScale::refit;
    else
        throw ValidationError("unknown --residual-scale '" + o.residual_scale + "' (expected fixed_theta or refit)");

    const auto cfg = boot_config(inv, o.boot > 0 ? o.boot : 500);
    const auto run = run_overid_test(data, pipeline, cfg, column, scale);

    Output out;
    out.digest = digest;
    out.results["space"] = to_string(pipeline.space);
    out.results["monotonicity"] = monotonicity_label(pipeline.monotonicity);
    out.results["column"] = sys.state_labels[static_cast<std::size_t>(column)];
    out.results["statistic"] = run.test.statistic;
    out.results["df"] = run.test.df;
    out.results["p_value"] = to_json(run.test.p_value);
    out.results["residual_scale"] = to_string(scale);
    Json residuals = Json::array();
    std::vector<double> sigma;
    for (const auto& r : run.test.residuals) {
        residuals.push_back({{"trial", r.trial}, {"residual", r.residual}, {"sigma", r.sigma}});
        sigma.push_back(r.sigma);
    }
    out.results["residuals"] = std::move(residuals);
    out.results["transition"] = transition_json(run.fit);
    Json b = bootstrap_summary(run.boot, cfg);
    b["transition"] = interval_block(run.boot.estimate, 0, k, k);
    out.results["inference"] = {{"bootstrap", std::move(b)}};
    out.diagnostics["rank"] = to_json(run.fit.diagnostics);
    out.diagnostics["warnings"] = run.fit.warnings;

    if (!o.plot_data.empty()) {
        write_linearity(o.plot_data, run.system, run.fit.probs, column, sigma);
        write_ate(o.plot_data, summaries, pipeline.space);
    }
    return out;
}

// ---------------------------------------------------------------- psace

void check_method_flags(const Options& o) {
    if (o.method < 1 || o.method > 4) throw ValidationError("--method must be 1, 2, 3 or 4");
    if (o.method == 4) return;
    const Monotonicity fixed = o.method == 1   ? Monotonicity{true, false}
                               : o.method == 2 ? Monotonicity{true, true}
                                               : Monotonicity{false, true};
    if ((o.mono_s && !fixed.surrogate) || (o.mono_y && !fixed.outcome))
        throw IdentificationError("method " + std::to_string(o.method) + " identifies PSACE under " +
                                  monotonicity_label(fixed) + " only; requested " +
                                  monotonicity_label({o.mono_s || fixed.surrogate, o.mono_y || fixed.outcome}) +
                                  " needs method 4");
}

struct StratumInterval {
    std::optional<double> estimate;
    double se = kNaN;
    double lower = kNaN;
    double upper = kNaN;
};

Json psace_json(const PsaceTable& table, const std::vector<std::array<StratumInterval, 4>>& intervals) {
    Json rows = Json::array();
    for (std::size_t g = 0; g < table.trials.size(); ++g) {
        Json strata;
        for (int s = 0; s < 4; ++s) {
            const auto& iv = intervals[g][static_cast<std::size_t>(s)];
            if (!iv.estimate) {
                strata[kStratumNames[static_cast<std::size_t>(s)]] = nullptr;
                continue;
            }
            strata[kStratumNames[static_cast<std::size_t>(s)]] = {{"estimate", *iv.estimate},
                                                                   {"se", to_json(std::optional<double>(iv.se))},
                                                                   {"ci_lower", to_json(std::optional<double>(iv.lower))},
                                                                   {"ci_upper", to_json(std::optional<double>(iv.upper))}};
        }
        rows.push_back({{"trial", table.trials[g]}, {"strata", std::move(strata)}});
    }
    return rows;
}

void write_psace_intervals(const fs::path& dir, const PsaceTable& table,
                           const std::vector<std::array<StratumInterval, 4>>& intervals) {
    auto out = open_output(dir / "psace_intervals.tsv");
    out << "stratum\ttrial\testimate\tci_lower\tci_upper\n";
    for (int s = 0; s < 4; ++s)
        for (std::size_t g = 0; g < table.trials.size(); ++g) {
            const auto& iv = intervals[g][static_cast<std::size_t>(s)];
            if (!iv.estimate) continue;
            out << kStratumNames[static_cast<std::size_t>(s)] << '\t' << table.trials[g] << '\t'
                << tsv_number(*iv.estimate) << '\t' << tsv_number(iv.lower) << '\t' << tsv_number(iv.upper) << '\n';
        }
}

Json scores_json(const PrincipalScoreSet& scores) {
    Json rows = Json::array();
    for (const auto& t : scores.trials) {
        Json delta;
        for (int s = 0; s < 4; ++s) delta[kStratumNames[static_cast<std::size_t>(s)]] = t.delta[static_cast<std::size_t>(s)];
        rows.push_back({{"trial", t.trial}, {"scores", std::move(delta)}, {"clipped", t.clipped}});
    }
    return rows;
}

Output psace_method1(const Invocation& inv, const MultiTrialDataset& data, const SummaryFrequencies& summaries) {
    const auto& o = inv.o;
    const auto fit = method1_estimate(summaries, o.clip);
    Output out;
    out.results["principal_scores"] = scores_json(fit.scores);
    Json params;
    for (int s : {0, 1, 3}) {
        const auto idx = static_cast<std::size_t>(s);
        params[kStratumNames[idx]] = {{"treated", fit.params.treated[idx]},
                                      {"control", fit.params.control[idx]},
                                      {"treated_out_of_range", static_cast<bool>(fit.params.treated_out_of_range[idx])},
                                      {"control_out_of_range", static_cast<bool>(fit.params.control_out_of_range[idx])}};
    }
    out.results["outcome_probabilities"] = std::move(params);
    Json pooled = Json::array();
    for (const auto& c : fit.pooled_cells)
        pooled.push_back({{"trial", c.trial},
                          {"treated_given_s0", to_json(c.treated_given_s0)},
                          {"control_given_s1", to_json(c.control_given_s1)}});
    out.results["pooled_cells"] = std::move(pooled);
    out.diagnostics["rank"] = {{"treated_design", to_json(fit.treated_design)},
                               {"control_design", to_json(fit.control_design)}};
    out.diagnostics["warnings"] = fit.warnings;

    std::vector<std::array<StratumInterval, 4>> intervals(fit.psace.trials.size());
    std::optional<BootstrapResult> boot;
    std::optional<BootstrapConfig> cfg;
    if (o.boot > 0) {
        require_seed(inv, "when --boot is positive");
        cfg = boot_config(inv, o.boot);
        const bool clip = o.clip;
        boot = bootstrap(data, [clip](const MultiTrialDataset& d) {
            return method1_estimate(summarize(d), clip).parameter_vector();
        }, *cfg);
        out.results["bootstrap"] = bootstrap_summary(*boot, *cfg);
    }
    const int position[4] = {6, 7, -1, 8};
    for (std::size_t g = 0; g < intervals.size(); ++g)
        for (int s = 0; s < 4; ++s) {
            auto& iv = intervals[g][static_cast<std::size_t>(s)];
            iv.estimate = fit.psace.estimates[g][static_cast<std::size_t>(s)];
            if (!iv.estimate || !boot) continue;
            const auto p = static_cast<std::size_t>(position[s]);
            iv.se = boot->estimate.se[static_cast<Eigen::Index>(p)];
            iv.lower = boot->estimate.ci[p].lower;
            iv.upper = boot->estimate.ci[p].upper;
        }
    out.results["psace"] = psace_json(fit.psace, intervals);
    out.results["assumptions"] = fit.psace.assumptions;
    if (!o.plot_data.empty()) write_psace_intervals(o.plot_data, fit.psace, intervals);
    return out;
}

CompositeResult composite_fit(int method, const Options& o, const SummaryFrequencies& s) {
    SolveOptions solve;
    solve.project_simplex = o.project;
    solve.force = o.force;
    if (method == 2) return monotone_variant_estimate(s, MonotoneVariant::both_monotone, solve);
    if (method == 3) return monotone_variant_estimate(s, MonotoneVariant::outcome_monotone, solve);
    return method4_estimate(s, {o.mono_s, o.mono_y}, solve);
}

/// Per trial: four PSACE slots (NaN when undefined) then the sixteen joint cells.
Eigen::VectorXd composite_vector(const CompositeResult& r) {
    const auto m = static_cast<Eigen::Index>(r.joints.size());
    Eigen::VectorXd v(m * 20);
    for (Eigen::Index g = 0; g < m; ++g) {
        const auto gi = static_cast<std::size_t>(g);
        for (int s = 0; s < 4; ++s) v[g * 20 + s] = value_or_nan(r.psace.estimates[gi][static_cast<std::size_t>(s)]);
        for (int c = 0; c < 16; ++c) v[g * 20 + 4 + c] = r.joints[gi].prob[static_cast<std::size_t>(c)];
    }
    return v;
}

Output psace_composite(const Invocation& inv, const MultiTrialDataset& data, const SummaryFrequencies& summaries) {
    const auto& o = inv.o;
    const int method = o.method;
    const auto fit = composite_fit(method, o, summaries);
    Output out;
    out.results["principal_scores"] = scores_json(principal_scores(summaries, o.clip));
    out.results["transition"] = transition_json(fit.transitions);
    out.diagnostics["rank"] = to_json(fit.transitions.diagnostics);
    out.diagnostics["warnings"] = fit.warnings;

    std::optional<BootstrapResult> boot;
    if (o.boot > 0) {
        require_seed(inv, "when --boot is positive");
        const auto cfg = boot_config(inv, o.boot);
        const Options copy = o;
        boot = bootstrap(data, [method, copy](const MultiTrialDataset& d) {
            return composite_vector(composite_fit(method, copy, summarize(d)));
        }, cfg);
        out.results["bootstrap"] = bootstrap_summary(*boot, cfg);
    }
    auto interval_at = [&](Eigen::Index p) {
        StratumInterval iv;
        if (!boot) return iv;
        iv.se = boot->estimate.se[p];
        iv.lower = boot->estimate.ci[static_cast<std::size_t>(p)].lower;
        iv.upper = boot->estimate.ci[static_cast<std::size_t>(p)].upper;
        return iv;
    };

    std::vector<std::array<StratumInterval, 4>> intervals(fit.joints.size());
    Json joints = Json::array();
    std::ofstream joint_tsv;
    if (!o.plot_data.empty()) {
        joint_tsv = open_output(fs::path(o.plot_data) / "joint_intervals.tsv");
        joint_tsv << "trial\ts0\ts1\ty0\ty1\tstatus\testimate\tci_lower\tci_upper\n";
    }
    for (std::size_t g = 0; g < fit.joints.size(); ++g) {
        const auto base = static_cast<Eigen::Index>(g) * 20;
        for (int s = 0; s < 4; ++s) {
            auto& iv = intervals[g][static_cast<std::size_t>(s)];
            const auto estimate = fit.psace.estimates[g][static_cast<std::size_t>(s)];
            if (estimate) iv = interval_at(base + s);
            iv.estimate = estimate;
        }
        const auto& joint = fit.joints[g];
        Json cells = Json::array();
        for (int s0 = 0; s0 < 2; ++s0)
            for (int s1 = 0; s1 < 2; ++s1)
                for (int y0 = 0; y0 < 2; ++y0)
                    for (int y1 = 0; y1 < 2; ++y1) {
                        const int c = FourWayJoint::cell_index(s0, s1, y0, y1);
                        const auto ci = static_cast<std::size_t>(c);
                        const auto iv = interval_at(base + 4 + c);
                        cells.push_back({{"s0", s0}, {"s1", s1}, {"y0", y0}, {"y1", y1},
                                         {"status", to_string(joint.status[ci])},
                                         {"probability", to_json(std::optional<double>(joint.prob[ci]))},
                                         {"se", to_json(std::optional<double>(iv.se))},
                                         {"ci_lower", to_json(std::optional<double>(iv.lower))},
                                         {"ci_upper", to_json(std::optional<double>(iv.upper))}});
                        if (joint_tsv.is_open())
                            joint_tsv << joint.trial << '\t' << s0 << '\t' << s1 << '\t' << y0 << '\t' << y1 << '\t'
                                      << to_string(joint.status[ci]) << '\t' << tsv_number(joint.prob[ci]) << '\t'
                                      << tsv_number(iv.lower) << '\t' << tsv_number(iv.upper) << '\n';
                    }
        joints.push_back({{"trial", joint.trial}, {"cells", std::move(cells)}});
    }
    out.results["joints"] = std::move(joints);
    out.results["psace"] = psace_json(fit.psace, intervals);
    out.results["assumptions"] = fit.psace.assumptions;
    if (!o.plot_data.empty()) write_psace_intervals(o.plot_data, fit.psace, intervals);
    return out;
}

Output cmd_psace(const Invocation& inv) {
    check_method_flags(inv.o);
    auto [data, digest] = load_input(inv, false);
    if (!data.layout.has_surrogate) throw ValidationError("psace needs a surrogate column in the input");
    const auto summaries = summarize(data);
    auto out = inv.o.method == 1 ? psace_method1(inv, data, summaries) : psace_composite(inv, data, summaries);
    out.digest = digest;
    out.results["method"] = inv.o.method;
    return out;
}

// ---------------------------------------------------------------- target

Output cmd_target(const Invocation& inv) {
    const auto& o = inv.o;
    auto [data, digest] = load_input(inv, true);
    if (!data.target) throw ValidationError("no control-only target trial labelled '" + o.target + "' in the input");
    const auto summaries = summarize(data);
    const auto pipeline = make_pipeline(inv, data.layout);
    const auto fit = pipeline(summaries);
    const auto& marginal = control_in_space(*summaries.target, pipeline.space);
    const Eigen::MatrixXd joint = joint_from_transitions(fit, marginal);
    const bool binary = joint.rows() == 2;

    Output out;
    out.digest = digest;
    out.results["space"] = to_string(pipeline.space);
    out.results["monotonicity"] = monotonicity_label(pipeline.monotonicity);
    out.results["target"] = data.target->label;
    out.results["target_control_marginal"] = to_json(marginal);
    out.results["transition"] = transition_json(fit);
    out.results["joint"] = to_json(joint);
    if (binary) out.results["derived"] = to_json(derived_estimands(joint, o.favorable));
    out.diagnostics["rank"] = to_json(fit.diagnostics);
    out.diagnostics["warnings"] = fit.warnings;

    if (o.boot > 0) {
        require_seed(inv, "when --boot is positive");
        const auto cfg = boot_config(inv, o.boot);
        const auto k = joint.rows();
        const int favorable = o.favorable;
        Estimator estimator = [&pipeline, binary, favorable](const MultiTrialDataset& d) {
            const auto s = summarize(d);
            const Eigen::MatrixXd j = joint_from_transitions(pipeline(s), control_in_space(*s.target, pipeline.space));
            Eigen::VectorXd v(j.size() + (binary ? 5 : 0));
            v.head(j.size()) = flatten(j);
            if (binary) {
                const auto e = derived_estimands(j, favorable);
                v.tail(5) << value_or_nan(e.treatment_harm_rate), value_or_nan(e.treatment_benefit_rate),
                    value_or_nan(e.persuasion_rate), value_or_nan(e.probability_sufficient),
                    value_or_nan(e.probability_necessary);
            }
            return v;
        };
        const auto boot = bootstrap(data, estimator, cfg);
        Json b = bootstrap_summary(boot, cfg);
        b["joint"] = interval_block(boot.estimate, 0, k, k);
        if (binary) {
            const char* names[5] = {"treatment_harm_rate", "treatment_benefit_rate", "persuasion_rate",
                                    "probability_sufficient", "probability_necessary"};
            Json derived;
            for (int i = 0; i < 5; ++i) {
                const auto p = static_cast<std::size_t>(k * k + i);
                derived[names[i]] = {{"se", to_json(std::optional<double>(boot.estimate.se[static_cast<Eigen::Index>(p)]))},
                                     {"ci_lower", to_json(std::optional<double>(boot.estimate.ci[p].lower))},
                                     {"ci_upper", to_json(std::optional<double>(boot.estimate.ci[p].upper))}};
            }
            b["derived"] = std::move(derived);
        }
        out.results["inference"] = {{"bootstrap", std::move(b)}};
    }
    return out;
}

// ---------------------------------------------------------------- simulate

Output cmd_simulate(const Invocation& inv) {
    const auto& o = inv.o;
    StudyConfig base;
    bool seed_from_config = false;
    Output out;
    if (!o.config.empty()) {
        const auto text = read_file(o.config);
        std::istringstream in(text);
        base = parse_study_config(in);
        seed_from_config = std::regex_search(text, std::regex(R"((^|\n)[ \t]*seed[ \t]*=)"));
        out.digest = "sha256:" + sha256_hex(text);
    }
    if (!seed_from_config) require_seed(inv, "for simulation");
    if (inv.given("--case")) base.spec.kind = parse_case(o.dgp_case);
    else if (o.config.empty()) throw ValidationError("--case is required (c1, c2, c3 or c4)");
    if (inv.given("--seed")) base.seed = o.seed;
    if (inv.given("--reps")) base.replicates = o.reps;
    if (inv.given("--boot")) base.bootstrap_replicates = o.boot;
    if (inv.given("--trials")) base.spec.trials = o.trials;
    if (inv.given("--treatment-prob")) base.spec.treatment_prob = o.treatment_prob;
    base.workers = o.threads;
    std::vector<std::int64_t> sizes = o.ng;
    if (sizes.empty()) sizes.push_back(base.spec.units_per_trial);

    std::vector<StudyResult> studies;
    for (auto n : sizes) {
        auto cfg = base;
        cfg.spec.units_per_trial = n;
        studies.push_back(run_study(cfg));
    }

    out.results["case"] = to_string(base.spec.kind);
    out.results["trials"] = base.spec.trials;
    out.results["replicates"] = base.replicates;
    out.results["bootstrap_replicates"] = base.bootstrap_replicates;
    out.results["treatment_prob"] = base.spec.treatment_prob;
    out.results["seed"] = base.seed;
    Json blocks = Json::array();
    for (const auto& st : studies) {
        Json params = Json::array();
        for (const auto& mt : st.metrics)
            params.push_back({{"name", mt.name}, {"truth", mt.truth}, {"bias", mt.bias}, {"sd", mt.sd},
                              {"ese", mt.ese}, {"cp95", mt.cp95}});
        Json reasons = Json::array();
        for (const auto& r : st.failure_reasons)
            if (!r.empty()) reasons.push_back(r);
        blocks.push_back({{"units_per_trial", st.config.spec.units_per_trial},
                          {"failures", st.failures},
                          {"failure_reasons", std::move(reasons)},
                          {"parameters", std::move(params)}});
    }
    out.results["studies"] = std::move(blocks);
    out.diagnostics["warnings"] = Json::array();

    if (!o.replicates_csv.empty()) {
        if (studies.size() == 1) {
            auto csv = open_output(o.replicates_csv);
            write_replicate_csv(csv, studies.front());
        } else {
            const fs::path path(o.replicates_csv);
            for (const auto& st : studies) {
                fs::path p = path;
                p.replace_filename(path.stem().string() + "_ng" + std::to_string(st.config.spec.units_per_trial) +
                                   path.extension().string());
                auto csv = open_output(p);
                write_replicate_csv(csv, st);
            }
        }
    }
    if (o.table) out.text = format_study_table(studies);
    return out;
}

// ---------------------------------------------------------------- driver

Json echo_options(const CLI::App& sub) {
    static const std::set<std::string> skipped = {"--threads", "--output", "--plot-data", "--replicates-csv",
                                                  "--timing", "--help"};
    Json echo = Json::object();
    for (const auto* opt : sub.get_options()) {
        const auto name = opt->get_name(false, true);
        if (name.rfind("--", 0) != 0 || skipped.count(name) || opt->count() == 0) continue;
        if (opt->get_type_size() == 0) {
            echo[name.substr(2)] = true;
        } else {
            const auto values = opt->results();
            echo[name.substr(2)] = values.size() == 1 ? Json(values.front()) : Json(values);
        }
    }
    return echo;
}

Json error_json(const std::string& kind, const std::string& message, int code, std::optional<std::size_t> line = {}) {
    Json e = {{"kind", kind}, {"message", message}, {"exit_code", code}};
    if (line) e["line"] = *line;
    return {{"error", std::move(e)}};
}

void add_common(CLI::App& sub, Options& o) {
    sub.add_option("--input", o.input, "CSV of trial,A,S,Y,count rows");
    sub.add_option("--space", o.space, "outcome, surrogate or composite");
    sub.add_flag("--mono-s", o.mono_s, "impose S1 >= S0");
    sub.add_flag("--mono-y", o.mono_y, "impose Y1 >= Y0");
    sub.add_flag("--project", o.project, "project transition rows onto the simplex");
    sub.add_flag("--force", o.force, "solve rank-deficient designs by minimum norm");
    sub.add_flag("--weighted", o.weighted, "weight trials by arm size");
    sub.add_option("--boot", o.boot, "bootstrap replicates");
    sub.add_option("--seed", o.seed, "master seed");
    sub.add_option("--ci", o.ci, "confidence level");
    sub.add_option("--ci-method", o.ci_method, "normal or percentile");
    sub.add_option("--favorable", o.favorable, "outcome level counted as favorable");
}

void add_run_controls(CLI::App& sub, Options& o) {
    sub.add_option("--output", o.output, "write the JSON report here instead of stdout");
    sub.add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    sub.add_flag("--timing", o.timing, "add wall-clock timing to the report");
}

}  // namespace

CliResult run_cli(const std::vector<std::string>& args) {
    CliResult result;
    Options o;
    CLI::App app{"Joint distributions of potential outcomes from multiple randomized trials", "jointpo"};
    app.require_subcommand(1);

    auto* estimate = app.add_subcommand("estimate", "estimate transition matrices and joint tables");
    add_common(*estimate, o);
    estimate->add_option("--plot-data", o.plot_data, "directory for linearity and ATE TSVs");

    auto* test = app.add_subcommand("test", "over-identification test of the linear transition model");
    add_common(*test, o);
    test->add_option("--column", o.column, "index of the tested treated state (default: last)");
    test->add_option("--residual-scale", o.residual_scale, "fixed_theta or refit");
    test->add_option("--plot-data", o.plot_data, "directory for linearity and ATE TSVs");

    auto* psace = app.add_subcommand("psace", "principal stratum average causal effects");
    add_common(*psace, o);
    psace->add_option("--method", o.method, "1, 2, 3 or 4");
    psace->add_flag("--clip", o.clip, "clip negative principal scores");
    psace->add_option("--plot-data", o.plot_data, "directory for interval TSVs");

    auto* target = app.add_subcommand("target", "transport transitions to a control-only target population");
    add_common(*target, o);
    target->add_option("--target", o.target, "label of the control-only target trial");

    auto* simulate = app.add_subcommand("simulate", "Monte Carlo study of the estimators");
    simulate->add_option("--case", o.dgp_case, "c1, c2, c3 or c4");
    simulate->add_option("--ng", o.ng, "units per trial; a comma list runs one study per size")->delimiter(',');
    simulate->add_option("--reps", o.reps, "Monte Carlo replicates");
    simulate->add_option("--boot", o.boot, "bootstrap replicates per Monte Carlo replicate");
    simulate->add_option("--seed", o.seed, "master seed");
    simulate->add_option("--trials", o.trials, "number of trials");
    simulate->add_option("--treatment-prob", o.treatment_prob, "P(A = 1)");
    simulate->add_option("--config", o.config, "key = value study configuration file");
    simulate->add_option("--replicates-csv", o.replicates_csv, "write per-replicate estimates here");
    simulate->add_flag("--table", o.table, "print a formatted results table instead of JSON");

    for (auto* sub : {estimate, test, psace, target, simulate}) add_run_controls(*sub, o);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        result.out = app.help();
        return result;
    } catch (const CLI::ParseError& e) {
        result.exit_code = kValidation;
        result.err = dump(error_json("usage", e.what(), kValidation));
        return result;
    }

    const auto* sub = app.get_subcommands().front();
    const Invocation inv{sub->get_name(), o, *sub};
    const auto start = std::chrono::steady_clock::now();
    try {
        Output out;
        if (inv.name == "estimate") out = cmd_estimate(inv);
        else if (inv.name == "test") out = cmd_test(inv);
        else if (inv.name == "psace") out = cmd_psace(inv);
        else if (inv.name == "target") out = cmd_target(inv);
        else out = cmd_simulate(inv);

        Json report;
        report["schema_version"] = kSchemaVersion;
        report["command"] = {{"name", inv.name}, {"options", echo_options(*sub)}};
        report["input_digest"] = out.digest ? Json(*out.digest) : Json(nullptr);
        report["seed"] = inv.given("--seed") ? Json(o.seed) : Json(nullptr);
        report["results"] = std::move(out.results);
        report["diagnostics"] = std::move(out.diagnostics);
        if (o.timing) {
            const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
            report["timing"] = {{"seconds", elapsed.count()}};
        }
        const auto text = dump(report);
        if (!o.output.empty()) {
            auto file = open_output(o.output);
            file << text;
        } else if (out.text.empty()) {
            result.out = text;
        }
        result.out += out.text;
    } catch (const ParseError& e) {
        result.exit_code = kValidation;
        result.err = dump(error_json("parse", e.what(), kValidation, e.line()));
    } catch (const ValidationError& e) {
        result.exit_code = kValidation;
        result.err = dump(error_json("validation", e.what(), kValidation));
    } catch (const IdentificationError& e) {
        result.exit_code = kIdentification;
        result.err = dump(error_json("identification", e.what(), kIdentification));
    } catch (const InferenceError& e) {
        result.exit_code = kInference;
        result.err = dump(error_json("inference", e.what(), kInference));
    } catch (const std::exception& e) {
        result.exit_code = kInternal;
        result.err = dump(error_json("internal", e.what(), kInternal));
    }
    return result;
}

}  // namespace jointpo::cli
