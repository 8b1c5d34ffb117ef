#pragma once

// Monte Carlo harness: population laws for the benchmark designs, seeded
// dataset simulation, and replicate studies with Bias / SD / ESE / CP95.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <optional>
#include <random>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jointpo/data_model.hpp"
#include "jointpo/errors.hpp"
#include "jointpo/inference.hpp"
#include "jointpo/parallel.hpp"
#include "jointpo/principal.hpp"
#include "jointpo/random.hpp"
#include "jointpo/transition.hpp"

namespace jointpo {

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class DgpCase { c1, c2, c3, c4, custom };

inline const char* to_string(DgpCase c) noexcept {
    switch (c) {
        case DgpCase::c1: return "c1";
        case DgpCase::c2: return "c2";
        case DgpCase::c3: return "c3";
        case DgpCase::c4: return "c4";
        case DgpCase::custom: return "custom";
    }
    return "?";
}

inline DgpCase parse_case(const std::string& name) {
    if (name == "c1" || name == "C1") return DgpCase::c1;
    if (name == "c2" || name == "C2") return DgpCase::c2;
    if (name == "c3" || name == "C3") return DgpCase::c3;
    if (name == "c4" || name == "C4") return DgpCase::c4;
    throw ValidationError("unknown simulation case '" + name + "' (expected c1, c2, c3 or c4)");
}

/// Exact per-trial laws. Cell probabilities follow CellLayout's (s, y)
/// order within an arm. `latent` holds P(Y0, Y1) as 2y0 + y1 without a
/// surrogate and P(S0, S1, Y0, Y1) at FourWayJoint::cell_index with one.
struct Population {
    CellLayout layout;
    std::vector<std::string> labels;
    std::vector<Eigen::VectorXd> control_cells;
    std::vector<Eigen::VectorXd> treated_cells;
    std::vector<Eigen::VectorXd> latent;
    std::vector<std::string> parameter_names;
    Eigen::VectorXd truth;

    std::size_t trials() const noexcept { return labels.size(); }
};

struct DgpSpec {
    DgpCase kind = DgpCase::c1;
    int trials = 10;
    std::int64_t units_per_trial = 500;
    double treatment_prob = 0.5;
    std::optional<Population> custom;
};

namespace detail {

inline double trial_step(int g) { return static_cast<double>(g) / 30.0; }

inline Population binary_outcome_population(int m, double shift) {
    Population pop;
    pop.layout = CellLayout{2, false};
    const double theta0 = expit(shift), theta1 = expit(1.0 + shift);
    for (int g = 0; g < m; ++g) {
        const double p = 0.5 + trial_step(g);
        pop.labels.push_back(std::to_string(g + 1));
        Eigen::VectorXd control(2), treated(2), latent(4);
        control << 1.0 - p, p;
        const double t1 = (1.0 - p) * theta0 + p * theta1;
        treated << 1.0 - t1, t1;
        latent << (1.0 - p) * (1.0 - theta0), (1.0 - p) * theta0, p * (1.0 - theta1), p * theta1;
        pop.control_cells.push_back(control);
        pop.treated_cells.push_back(treated);
        pop.latent.push_back(latent);
    }
    pop.parameter_names = {"P(Y1=1|Y0=0)", "P(Y1=1|Y0=1)"};
    pop.truth.resize(2);
    pop.truth << theta0, theta1;
    return pop;
}

/// Observed cells from a 16-cell latent law: control sees (S0, Y0), treated (S1, Y1).
inline void observe_composite(const Eigen::VectorXd& latent, Eigen::VectorXd& control, Eigen::VectorXd& treated) {
    control = Eigen::VectorXd::Zero(4);
    treated = Eigen::VectorXd::Zero(4);
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c)
                for (int d = 0; d < 2; ++d) {
                    const double p = latent[FourWayJoint::cell_index(a, b, c, d)];
                    control[a * 2 + c] += p;
                    treated[b * 2 + d] += p;
                }
}

inline Population c3_population(int m) {
    Population pop;
    pop.layout = CellLayout{2, true};
    double post_s[4], post_y[4];
    for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 2; ++c) {
            post_s[a * 2 + c] = expit((a + c - 1) / 2.0);
            post_y[a * 2 + c] = expit((a + c + 1) / 2.0);
        }
    for (int g = 0; g < m; ++g) {
        const double p = 0.5 + trial_step(g);
        Eigen::VectorXd latent = Eigen::VectorXd::Zero(16);
        for (int a = 0; a < 2; ++a)
            for (int c = 0; c < 2; ++c) {
                const double base = (a ? p : 1.0 - p) * (c ? p : 1.0 - p);
                const double ps = post_s[a * 2 + c], py = post_y[a * 2 + c];
                for (int b = 0; b < 2; ++b)
                    for (int d = 0; d < 2; ++d)
                        latent[FourWayJoint::cell_index(a, b, c, d)] =
                            base * (b ? ps : 1.0 - ps) * (d ? py : 1.0 - py);
            }
        Eigen::VectorXd control, treated;
        observe_composite(latent, control, treated);
        pop.labels.push_back(std::to_string(g + 1));
        pop.control_cells.push_back(control);
        pop.treated_cells.push_back(treated);
        pop.latent.push_back(latent);
    }
    pop.truth.resize(8);
    for (int j = 0; j < 4; ++j) {
        const std::string cond = "|S0=" + std::to_string(j / 2) + ",Y0=" + std::to_string(j % 2) + ")";
        pop.parameter_names.push_back("P(S1=1" + cond);
        pop.truth[j] = post_s[j];
    }
    for (int j = 0; j < 4; ++j) {
        const std::string cond = "|S0=" + std::to_string(j / 2) + ",Y0=" + std::to_string(j % 2) + ")";
        pop.parameter_names.push_back("P(Y1=1" + cond);
        pop.truth[4 + j] = post_y[j];
    }
    return pop;
}

inline Population c4_population(int m) {
    Population pop;
    pop.layout = CellLayout{2, true};
    double treated_y[4], control_y[4];
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            treated_y[2 * a + b] = expit((a + b + 1) / 2.0);
            control_y[2 * a + b] = expit((a + b - 1) / 2.0);
        }
    for (int g = 0; g < m; ++g) {
        const double p = 0.3 + trial_step(g), q = 0.5 + trial_step(g);
        // S0 is reset to 0 whenever S1 = 0, folding stratum 10 into 00.
        double strata[4];
        strata[stratum_index(0, 0)] = 1.0 - q;
        strata[stratum_index(0, 1)] = (1.0 - p) * q;
        strata[stratum_index(1, 0)] = 0.0;
        strata[stratum_index(1, 1)] = p * q;
        Eigen::VectorXd latent = Eigen::VectorXd::Zero(16);
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                const int s = stratum_index(a, b);
                for (int c = 0; c < 2; ++c)
                    for (int d = 0; d < 2; ++d)
                        latent[FourWayJoint::cell_index(a, b, c, d)] =
                            strata[s] * (c ? control_y[s] : 1.0 - control_y[s]) *
                            (d ? treated_y[s] : 1.0 - treated_y[s]);
            }
        Eigen::VectorXd control, treated;
        observe_composite(latent, control, treated);
        pop.labels.push_back(std::to_string(g + 1));
        pop.control_cells.push_back(control);
        pop.treated_cells.push_back(treated);
        pop.latent.push_back(latent);
    }
    const int order[3] = {0, 1, 3};
    pop.truth.resize(9);
    for (int j = 0; j < 3; ++j) {
        const std::string stratum = std::string("S0=") + kStratumNames[order[j]][0] + ",S1=" + kStratumNames[order[j]][1];
        pop.parameter_names.push_back("P(Y0=1|" + stratum + ")");
        pop.truth[j] = control_y[order[j]];
    }
    for (int j = 0; j < 3; ++j) {
        const std::string stratum = std::string("S0=") + kStratumNames[order[j]][0] + ",S1=" + kStratumNames[order[j]][1];
        pop.parameter_names.push_back("P(Y1=1|" + stratum + ")");
        pop.truth[3 + j] = treated_y[order[j]];
    }
    for (int j = 0; j < 3; ++j) {
        const std::string stratum = std::string("S0=") + kStratumNames[order[j]][0] + ",S1=" + kStratumNames[order[j]][1];
        pop.parameter_names.push_back("PSACE(" + stratum + ")");
        pop.truth[6 + j] = treated_y[order[j]] - control_y[order[j]];
    }
    return pop;
}

inline void check_population(const Population& pop) {
    const auto cells = pop.layout.size() / 2;
    if (pop.trials() < 2) throw ValidationError("population needs at least two trials");
    if (pop.control_cells.size() != pop.trials() || pop.treated_cells.size() != pop.trials())
        throw ValidationError("population needs control and treated cell laws for every trial");
    auto check = [&](const Eigen::VectorXd& v, const std::string& what) {
        if (static_cast<std::size_t>(v.size()) != cells)
            throw ValidationError(what + " has " + std::to_string(v.size()) + " cells, expected " + std::to_string(cells));
        if ((v.array() < 0.0).any() || !v.allFinite() || std::abs(v.sum() - 1.0) > 1e-10)
            throw ValidationError(what + " is not a probability vector");
    };
    for (std::size_t g = 0; g < pop.trials(); ++g) {
        check(pop.control_cells[g], "control law of trial '" + pop.labels[g] + "'");
        check(pop.treated_cells[g], "treated law of trial '" + pop.labels[g] + "'");
    }
    if (pop.parameter_names.size() != static_cast<std::size_t>(pop.truth.size()))
        throw ValidationError("population parameter names and truth differ in length");
}

}  // namespace detail

/// Closed-form laws and true parameters. Trial g (1-based) of the binary
/// designs has P(Y0 = 1) = 0.5 + (g - 1) / 30.
inline Population dgp_population(const DgpSpec& spec) {
    if (spec.trials < 2) throw ValidationError("simulation needs at least two trials");
    switch (spec.kind) {
        case DgpCase::c1: return detail::binary_outcome_population(spec.trials, -0.5);
        case DgpCase::c2: return detail::binary_outcome_population(spec.trials, 0.5);
        case DgpCase::c3: return detail::c3_population(spec.trials);
        case DgpCase::c4: return detail::c4_population(spec.trials);
        case DgpCase::custom:
            if (!spec.custom) throw ValidationError("custom simulation case needs a population");
            detail::check_population(*spec.custom);
            return *spec.custom;
    }
    throw ValidationError("unknown simulation case");
}

/// Exact frequencies of a population, as if each arm had `arm_size` units.
inline SummaryFrequencies population_summaries(const Population& pop, std::int64_t arm_size = 1) {
    SummaryFrequencies out;
    out.layout = pop.layout;
    const int k = pop.layout.outcome_levels;
    const int ns = pop.layout.surrogate_levels();
    for (std::size_t g = 0; g < pop.trials(); ++g) {
        TrialSummary t;
        t.label = pop.labels[g];
        t.arm_sizes = {arm_size, arm_size};
        auto fill = [&](const Eigen::VectorXd& cells, Eigen::VectorXd& marginal, Eigen::VectorXd& surrogate,
                        Eigen::VectorXd& composite) {
            marginal = Eigen::VectorXd::Zero(k);
            for (int s = 0; s < ns; ++s)
                for (int y = 0; y < k; ++y) marginal[y] += cells[s * k + y];
            if (!pop.layout.has_surrogate) return;
            composite = cells;
            surrogate = Eigen::VectorXd::Zero(2);
            for (int s = 0; s < 2; ++s)
                for (int y = 0; y < k; ++y) surrogate[s] += cells[s * k + y];
        };
        fill(pop.control_cells[g], t.control_marginal, t.control_surrogate, t.control_composite);
        fill(pop.treated_cells[g], t.treated_marginal, t.treated_surrogate, t.treated_composite);
        out.trials.push_back(std::move(t));
    }
    return out;
}

inline constexpr std::uint64_t kSimulationStream = 0x51D;
inline constexpr std::uint64_t kStudyBootstrapStream = 0x5B007;

/// One simulated dataset: per trial, a Binomial(n_g, treatment_prob) treated
/// count and multinomial cell counts within each arm. Aggregating unit-level
/// draws gives the same law.
inline MultiTrialDataset simulate_dataset(const DgpSpec& spec, std::uint64_t seed) {
    if (spec.units_per_trial <= 0) throw ValidationError("units per trial must be positive");
    if (!(spec.treatment_prob > 0.0 && spec.treatment_prob < 1.0))
        throw ValidationError("treatment probability must lie in (0, 1)");
    const auto pop = dgp_population(spec);
    MultiTrialDataset data;
    data.layout = pop.layout;
    auto rng = make_engine(seed);
    const auto half = pop.layout.size() / 2;
    for (std::size_t g = 0; g < pop.trials(); ++g) {
        std::binomial_distribution<std::int64_t> arm(spec.units_per_trial, spec.treatment_prob);
        const std::int64_t treated = arm(rng);
        const std::int64_t control = spec.units_per_trial - treated;
        TrialCellCounts t{pop.labels[g], std::vector<std::int64_t>(pop.layout.size(), 0)};
        const auto& c = pop.control_cells[g];
        const auto& tr = pop.treated_cells[g];
        const auto c_counts = sample_multinomial(rng, control, std::span<const double>(c.data(), half));
        const auto t_counts = sample_multinomial(rng, treated, std::span<const double>(tr.data(), half));
        for (std::size_t i = 0; i < half; ++i) {
            t.counts[i] = c_counts[i];
            t.counts[half + i] = t_counts[i];
        }
        data.trials.push_back(std::move(t));
    }
    return data;
}

/// Default estimator for each benchmark design, returning the parameters in
/// the population's `parameter_names` order.
inline Estimator default_estimator(DgpCase kind) {
    switch (kind) {
        case DgpCase::c1:
        case DgpCase::c2:
            return [](const MultiTrialDataset& d) {
                const auto trans = solve_transitions(build_system(summarize(d), StateSpace::outcome));
                Eigen::VectorXd v(2);
                v << trans.probs(0, 1), trans.probs(1, 1);
                return v;
            };
        case DgpCase::c3:
            return [](const MultiTrialDataset& d) {
                const auto trans = solve_transitions(build_system(summarize(d), StateSpace::composite));
                Eigen::VectorXd v(8);
                for (int j = 0; j < 4; ++j) {
                    v[j] = trans.probs(j, 2) + trans.probs(j, 3);
                    v[4 + j] = trans.probs(j, 1) + trans.probs(j, 3);
                }
                return v;
            };
        case DgpCase::c4:
            return [](const MultiTrialDataset& d) { return method1_estimate(summarize(d)).parameter_vector(); };
        case DgpCase::custom: break;
    }
    throw ValidationError("custom simulation cases need an explicit estimator");
}

struct StudyConfig {
    DgpSpec spec;
    int replicates = 1000;
    int bootstrap_replicates = 100;
    std::uint64_t seed = 0;
    int workers = 1;
    double max_failure_fraction = 0.05;
};

struct ParameterMetrics {
    std::string name;
    double truth = 0.0;
    double bias = 0.0;
    double sd = 0.0;
    double ese = 0.0;
    double cp95 = 0.0;
};

struct StudyResult {
    StudyConfig config;
    std::vector<std::string> parameter_names;
    Eigen::VectorXd truth;
    Eigen::MatrixXd estimates;  ///< replicates x parameters, NaN rows when failed
    Eigen::MatrixXd std_errors;
    std::vector<bool> failed;
    std::vector<std::string> failure_reasons;
    int failures = 0;
    std::vector<ParameterMetrics> metrics;
};

/// Bias, SD (n - 1 denominator), ESE = sqrt(mean se^2) and coverage of
/// estimate +- 1.96 se, over the replicates that did not fail.
inline std::vector<ParameterMetrics> metrics_from_replicates(const std::vector<std::string>& names,
                                                             const Eigen::VectorXd& truth,
                                                             const Eigen::MatrixXd& estimates,
                                                             const Eigen::MatrixXd& std_errors,
                                                             const std::vector<bool>& failed) {
    std::vector<ParameterMetrics> out;
    for (Eigen::Index j = 0; j < truth.size(); ++j) {
        ParameterMetrics pm;
        pm.name = names[static_cast<std::size_t>(j)];
        pm.truth = truth[j];
        std::vector<double> kept;
        double var_sum = 0.0;
        int count = 0, covered = 0;
        for (Eigen::Index r = 0; r < estimates.rows(); ++r) {
            if (failed[static_cast<std::size_t>(r)]) continue;
            const double est = estimates(r, j), se = std_errors(r, j);
            kept.push_back(est);
            var_sum += se * se;
            if (std::abs(est - truth[j]) <= 1.96 * se) ++covered;
            ++count;
        }
        if (count == 0) throw InferenceError("no successful replicates");
        const auto [mean, var] = detail::mean_and_variance(kept);
        pm.bias = mean - truth[j];
        pm.sd = std::sqrt(var);
        pm.ese = std::sqrt(var_sum / count);
        pm.cp95 = static_cast<double>(covered) / count;
        out.push_back(pm);
    }
    return out;
}

/// Replicate r simulates with derive_seed(seed, simulation stream, r) and
/// bootstraps with derive_seed(seed, bootstrap stream, r), so the result
/// does not depend on the worker count.
inline StudyResult run_study(const StudyConfig& config, const Estimator& estimator) {
    if (config.replicates < 2) throw ValidationError("a study needs at least 2 replicates");
    if (config.bootstrap_replicates < 2) throw ValidationError("a study needs at least 2 bootstrap replicates");
    if (config.spec.units_per_trial <= 0) throw ValidationError("units per trial must be positive");
    const auto pop = dgp_population(config.spec);
    const auto p = pop.truth.size();
    const auto reps = static_cast<std::size_t>(config.replicates);

    StudyResult out;
    out.config = config;
    out.parameter_names = pop.parameter_names;
    out.truth = pop.truth;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.estimates = Eigen::MatrixXd::Constant(config.replicates, p, nan);
    out.std_errors = Eigen::MatrixXd::Constant(config.replicates, p, nan);
    std::vector<char> failed(reps, 0);
    out.failure_reasons.assign(reps, {});

    parallel_for_index(reps, config.workers, [&](std::size_t r) {
        try {
            const auto data = simulate_dataset(config.spec, derive_seed(config.seed, kSimulationStream, r));
            BootstrapConfig boot;
            boot.replicates = config.bootstrap_replicates;
            boot.seed = derive_seed(config.seed, kStudyBootstrapStream, r);
            const auto result = bootstrap(data, estimator, boot);
            if (result.estimate.point.size() != p) throw ValidationError("estimator length does not match the truth");
            const auto row = static_cast<Eigen::Index>(r);
            out.estimates.row(row) = result.estimate.point.transpose();
            out.std_errors.row(row) = result.estimate.se.transpose();
        } catch (const EstimationError& e) {
            failed[r] = 1;
            out.failure_reasons[r] = e.what();
        } catch (const ValidationError&) {
            throw;
        } catch (const Error& e) {
            failed[r] = 1;
            out.failure_reasons[r] = e.what();
        }
    });
    for (char f : failed) {
        out.failed.push_back(f != 0);
        out.failures += f ? 1 : 0;
    }
    if (static_cast<double>(out.failures) > config.max_failure_fraction * config.replicates)
        throw InferenceError(std::to_string(out.failures) + " of " + std::to_string(config.replicates) +
                             " study replicates failed");
    out.metrics = metrics_from_replicates(out.parameter_names, out.truth, out.estimates, out.std_errors, out.failed);
    return out;
}

inline StudyResult run_study(const StudyConfig& config) {
    return run_study(config, default_estimator(config.spec.kind));
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ValidationError("config key '" + key + "': bad value '" + value + "'");
    return out;
}

}  // namespace detail

/// `key = value` lines; `#` starts a comment. Keys: case, trials, ng, reps,
/// boot, seed, treatment_prob.
inline StudyConfig parse_study_config(std::istream& in) {
    StudyConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(static_cast<std::size_t>(lineno), "expected 'key = value'");
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        if (key == "case") cfg.spec.kind = parse_case(value);
        else if (key == "trials" || key == "m") cfg.spec.trials = detail::parse_number<int>(key, value);
        else if (key == "ng" || key == "n_g") cfg.spec.units_per_trial = detail::parse_number<std::int64_t>(key, value);
        else if (key == "reps") cfg.replicates = detail::parse_number<int>(key, value);
        else if (key == "boot") cfg.bootstrap_replicates = detail::parse_number<int>(key, value);
        else if (key == "seed") cfg.seed = detail::parse_number<std::uint64_t>(key, value);
        else if (key == "treatment_prob") cfg.spec.treatment_prob = std::stod(value);
        else throw ParseError(static_cast<std::size_t>(lineno), "unknown config key '" + key + "'");
    }
    return cfg;
}

/// Replicate matrix as CSV with %.17g values, enough to recompute the
/// metrics bit for bit.
inline void write_replicate_csv(std::ostream& out, const StudyResult& study) {
    out << "replicate,failed";
    for (const auto& n : study.parameter_names) out << ",\"est:" << n << '"';
    for (const auto& n : study.parameter_names) out << ",\"se:" << n << '"';
    out << '\n';
    char buf[40];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
    };
    for (Eigen::Index r = 0; r < study.estimates.rows(); ++r) {
        out << r << ',' << (study.failed[static_cast<std::size_t>(r)] ? 1 : 0);
        for (Eigen::Index j = 0; j < study.estimates.cols(); ++j) put(study.estimates(r, j));
        for (Eigen::Index j = 0; j < study.std_errors.cols(); ++j) put(study.std_errors(r, j));
        out << '\n';
    }
}

struct ReplicateTable {
    std::vector<std::string> parameter_names;
    Eigen::MatrixXd estimates;
    Eigen::MatrixXd std_errors;
    std::vector<bool> failed;
};

namespace detail {

/// Comma split honouring double-quoted fields ("" inside quotes is a quote).
inline std::vector<std::string> split_quoted(const std::string& line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else if (c != '\r') {
            fields.back() += c;
        }
    }
    return fields;
}

}  // namespace detail

inline ReplicateTable read_replicate_csv(std::istream& in) {
    ReplicateTable table;
    std::string line;
    if (!std::getline(in, line)) throw ParseError(static_cast<std::size_t>(1), "empty replicate file");
    const auto header = detail::split_quoted(line);
    if (header.size() < 4 || (header.size() - 2) % 2 != 0) throw ParseError(static_cast<std::size_t>(1), "bad replicate header");
    const auto p = (header.size() - 2) / 2;
    for (std::size_t j = 0; j < p; ++j) table.parameter_names.push_back(header[2 + j].substr(4));
    std::vector<std::vector<double>> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = detail::split_quoted(line);
        if (fields.size() != header.size()) throw ParseError(static_cast<std::size_t>(lineno), "wrong number of fields");
        table.failed.push_back(fields[1] == "1");
        std::vector<double> values;
        for (std::size_t j = 2; j < fields.size(); ++j) values.push_back(std::strtod(fields[j].c_str(), nullptr));
        rows.push_back(std::move(values));
    }
    const auto r_count = static_cast<Eigen::Index>(rows.size());
    table.estimates.resize(r_count, static_cast<Eigen::Index>(p));
    table.std_errors.resize(r_count, static_cast<Eigen::Index>(p));
    for (Eigen::Index r = 0; r < r_count; ++r)
        for (std::size_t j = 0; j < p; ++j) {
            table.estimates(r, static_cast<Eigen::Index>(j)) = rows[static_cast<std::size_t>(r)][j];
            table.std_errors(r, static_cast<Eigen::Index>(j)) = rows[static_cast<std::size_t>(r)][p + j];
        }
    return table;
}

/// Text table with one Bias / SD / ESE / CP95 block per study, side by side.
inline std::string format_study_table(const std::vector<StudyResult>& studies) {
    if (studies.empty()) return {};
    std::ostringstream out;
    std::size_t width = 9;
    for (const auto& n : studies.front().parameter_names) width = std::max(width, n.size() + 2);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), "case");
    out << buf;
    for (const auto& s : studies) {
        std::snprintf(buf, sizeof buf, " | n_g = %-27lld", static_cast<long long>(s.config.spec.units_per_trial));
        out << buf;
    }
    out << '\n';
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), to_string(studies.front().config.spec.kind));
    out << buf;
    for (std::size_t i = 0; i < studies.size(); ++i) out << " | " << "  Bias     SD    ESE   CP95";
    out << '\n';
    for (std::size_t j = 0; j < studies.front().parameter_names.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), studies.front().parameter_names[j].c_str());
        out << buf;
        for (const auto& s : studies) {
            const auto& m = s.metrics[j];
            std::snprintf(buf, sizeof buf, " | %6.3f %6.3f %6.3f %6.3f", m.bias, m.sd, m.ese, m.cp95);
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace jointpo
