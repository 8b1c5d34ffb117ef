#pragma once

// Uncertainty for the transition estimator: stratified multinomial
// bootstrap, the analytic plug-in sandwich variance, and the
// overidentification J statistic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <Eigen/Dense>

#include "jointpo/data_model.hpp"
#include "jointpo/errors.hpp"
#include "jointpo/parallel.hpp"
#include "jointpo/random.hpp"
#include "jointpo/transition.hpp"

namespace jointpo {

enum class CiMethod { normal, percentile };
enum class VarianceSource { bootstrap, plugin };

inline const char* to_string(CiMethod m) noexcept { return m == CiMethod::normal ? "normal" : "percentile"; }
inline const char* to_string(VarianceSource s) noexcept { return s == VarianceSource::bootstrap ? "bootstrap" : "plugin"; }

struct BootstrapConfig {
    int replicates = 500;
    std::uint64_t seed = 0;
    double ci_level = 0.95;
    CiMethod ci_method = CiMethod::normal;
    int workers = 1;
    int max_attempts = 100;
    double max_failure_fraction = 0.10;
};

struct Interval {
    double lower = std::numeric_limits<double>::quiet_NaN();
    double upper = std::numeric_limits<double>::quiet_NaN();
};

struct VarianceEstimate {
    Eigen::VectorXd point;
    Eigen::VectorXd se;
    std::vector<Interval> ci;
    VarianceSource source = VarianceSource::bootstrap;
    double ci_level = 0.95;
};

struct BootstrapResult {
    VarianceEstimate estimate;
    Eigen::MatrixXd replicates;  ///< B x p; rows of failed replicates are NaN
    std::vector<bool> failed;
    int failures = 0;
    int redraws = 0;
};

using Estimator = std::function<Eigen::VectorXd(const MultiTrialDataset&)>;

inline constexpr std::uint64_t kBootstrapStream = 0xB0075;

inline double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// Upper tail P(chi2_df > x) via the regularized upper incomplete gamma.
inline double chi_square_sf(double x, double df) {
    if (!(df > 0.0)) throw InferenceError("chi-square tail needs positive degrees of freedom");
    if (x <= 0.0) return 1.0;
    if (std::isinf(x)) return 0.0;
    return boost::math::gamma_q(df / 2.0, x / 2.0);
}

/// Redraws each trial's cell counts as a multinomial over that trial's cells
/// with the trial's total, i.e. unit resampling within trial.
inline MultiTrialDataset resample(const MultiTrialDataset& data, Engine& rng) {
    MultiTrialDataset out = data;
    auto redraw = [&](TrialCellCounts& t) {
        const auto n = t.total();
        std::vector<double> weights(t.counts.begin(), t.counts.end());
        t.counts = sample_multinomial(rng, n, weights);
    };
    for (auto& t : out.trials) redraw(t);
    if (out.target) redraw(*out.target);
    return out;
}

namespace detail {

/// Type-7 quantile of sorted values.
/// Mean and (n - 1) variance computed about the first value, so constant
/// input gives exactly that value and zero.
inline std::pair<double, double> mean_and_variance(const std::vector<double>& values) {
    const double shift = values.front();
    double sum = 0.0;
    for (double v : values) sum += v - shift;
    const double centre = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - shift - centre) * (v - shift - centre);
    const double var = values.size() > 1 ? ss / static_cast<double>(values.size() - 1) : 0.0;
    return {shift + centre, var};
}

inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

/// SE (sample SD over finite replicates) and CIs per parameter.
inline VarianceEstimate summarize_replicates(const Eigen::VectorXd& point, const Eigen::MatrixXd& replicates,
                                             double ci_level, CiMethod method) {
    VarianceEstimate est;
    est.point = point;
    est.source = VarianceSource::bootstrap;
    est.ci_level = ci_level;
    const auto p = point.size();
    est.se = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
    est.ci.assign(static_cast<std::size_t>(p), Interval{});
    const double z = normal_quantile(0.5 + ci_level / 2.0);
    for (Eigen::Index j = 0; j < p; ++j) {
        std::vector<double> values;
        for (Eigen::Index r = 0; r < replicates.rows(); ++r)
            if (std::isfinite(replicates(r, j))) values.push_back(replicates(r, j));
        if (values.size() >= 2) est.se[j] = std::sqrt(detail::mean_and_variance(values).second);
        auto& ci = est.ci[static_cast<std::size_t>(j)];
        if (method == CiMethod::normal) {
            ci.lower = point[j] - z * est.se[j];
            ci.upper = point[j] + z * est.se[j];
        } else if (!values.empty()) {
            std::sort(values.begin(), values.end());
            const double alpha = 1.0 - ci_level;
            ci.lower = detail::quantile_sorted(values, alpha / 2.0);
            ci.upper = detail::quantile_sorted(values, 1.0 - alpha / 2.0);
        }
    }
    return est;
}

/// Stratified bootstrap of an arbitrary estimator. Replicate r uses an
/// engine seeded from (seed, r, attempt), so output is identical for any
/// worker count. A replicate whose estimator throws is redrawn up to
/// max_attempts times and then counted as failed.
inline BootstrapResult bootstrap(const MultiTrialDataset& data, const Estimator& estimator,
                                 const BootstrapConfig& config) {
    if (config.replicates < 2) throw ValidationError("bootstrap needs at least 2 replicates");
    if (!(config.ci_level > 0.0 && config.ci_level < 1.0)) throw ValidationError("ci level must lie in (0, 1)");
    const Eigen::VectorXd point = estimator(data);
    const auto p = point.size();
    const auto b_count = static_cast<std::size_t>(config.replicates);

    BootstrapResult result;
    result.replicates = Eigen::MatrixXd::Constant(config.replicates, p, std::numeric_limits<double>::quiet_NaN());
    std::vector<char> failed(b_count, 0);
    std::vector<int> redraws(b_count, 0);

    parallel_for_index(b_count, config.workers, [&](std::size_t r) {
        for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
            auto rng = make_engine(derive_seed(config.seed, kBootstrapStream, r, static_cast<std::uint64_t>(attempt)));
            const auto sample = resample(data, rng);
            try {
                const Eigen::VectorXd value = estimator(sample);
                if (value.size() != p) throw InferenceError("estimator changed its output length");
                result.replicates.row(static_cast<Eigen::Index>(r)) = value.transpose();
                redraws[r] = attempt;
                return;
            } catch (const InferenceError&) {
                throw;
            } catch (const Error&) {
                continue;
            }
        }
        redraws[r] = config.max_attempts;
        failed[r] = 1;
    });

    for (std::size_t r = 0; r < b_count; ++r) {
        result.failed.push_back(failed[r] != 0);
        result.redraws += redraws[r];
        if (failed[r]) ++result.failures;
    }
    if (static_cast<double>(result.failures) > config.max_failure_fraction * static_cast<double>(config.replicates))
        throw InferenceError(std::to_string(result.failures) + " of " + std::to_string(config.replicates) +
                             " bootstrap replicates failed after " + std::to_string(config.max_attempts) +
                             " redraws each");
    result.estimate = summarize_replicates(point, result.replicates, config.ci_level, config.ci_method);
    return result;
}

/// Analytic sandwich variance C^-1 V C^-1 / n for the binary transition
/// parameters theta = (Pi(0,1), Pi(1,1)).
///
/// Each trial contributes the influence function
///     psi_g = X_g * ( IF(Yhat_g) - theta' IF(Xhat_g) ),
/// with ratio influence functions (I(cell) - p * I(arm)) / P(G=g, A=a). psi_g
/// is a linear combination of disjoint cell indicators, so its variance is
/// expanded exactly from the empirical cell probabilities, with
/// P(G=g) = n_g / n.
inline VarianceEstimate plugin_variance(const SummaryFrequencies& summaries, const Eigen::Vector2d& theta,
                                        StateSpace space = StateSpace::outcome, double ci_level = 0.95) {
    if (space == StateSpace::composite) throw ValidationError("plug-in variance covers binary state spaces only");
    if (space == StateSpace::outcome && summaries.layout.outcome_levels != 2)
        throw ValidationError("plug-in variance covers binary outcomes only; use the bootstrap for k > 2");
    if (space == StateSpace::surrogate && !summaries.layout.has_surrogate)
        throw ValidationError("surrogate plug-in variance needs surrogate data");
    const auto m = summaries.trial_count();
    if (m < 2) throw IdentificationError("at least two experimental trials are required");
    const double n = static_cast<double>(summaries.total_units());

    Eigen::Matrix2d c_mat = Eigen::Matrix2d::Zero();
    Eigen::Matrix2d v_mat = Eigen::Matrix2d::Zero();
    for (const auto& t : summaries.trials) {
        const Eigen::Vector2d x = space == StateSpace::outcome ? Eigen::Vector2d(t.control_marginal)
                                                               : Eigen::Vector2d(t.control_surrogate);
        const Eigen::Vector2d treated = space == StateSpace::outcome ? Eigen::Vector2d(t.treated_marginal)
                                                                     : Eigen::Vector2d(t.treated_surrogate);
        c_mat += x * x.transpose();

        const double q0 = static_cast<double>(t.arm_sizes[0]) / n;
        const double q1 = static_cast<double>(t.arm_sizes[1]) / n;
        const double fitted = x.dot(theta);
        Eigen::Matrix2d second = Eigen::Matrix2d::Zero();
        Eigen::Vector2d first = Eigen::Vector2d::Zero();
        for (int y = 0; y < 2; ++y) {
            const double p_control = q0 * x[y];
            const Eigen::Vector2d coef_control = x * (-(theta[y] - fitted) / q0);
            second += coef_control * coef_control.transpose() * p_control;
            first += coef_control * p_control;

            const double p_treated = q1 * treated[y];
            const Eigen::Vector2d coef_treated = x * (((y == 1 ? 1.0 : 0.0) - treated[1]) / q1);
            second += coef_treated * coef_treated.transpose() * p_treated;
            first += coef_treated * p_treated;
        }
        v_mat += second - first * first.transpose();
    }
    const double md = static_cast<double>(m);
    c_mat /= md;
    v_mat /= md * md;
    Eigen::FullPivLU<Eigen::Matrix2d> lu(c_mat);
    if (!lu.isInvertible()) throw IdentificationError("plug-in variance: C matrix is singular");
    const Eigen::Matrix2d c_inv = lu.inverse();
    const Eigen::Matrix2d sigma = c_inv * v_mat * c_inv;

    VarianceEstimate est;
    est.point = theta;
    est.source = VarianceSource::plugin;
    est.ci_level = ci_level;
    est.se.resize(2);
    const double z = normal_quantile(0.5 + ci_level / 2.0);
    for (int j = 0; j < 2; ++j) {
        est.se[j] = std::sqrt(std::max(sigma(j, j), 0.0) / n);
        est.ci.push_back({theta[j] - z * est.se[j], theta[j] + z * est.se[j]});
    }
    return est;
}

struct TrialResidual {
    std::string trial;
    double residual = 0.0;
    double sigma = 0.0;
};

struct OveridTestResult {
    double statistic = 0.0;
    int df = 0;
    std::optional<double> p_value;  ///< empty when just-identified
    int target = 0;
    std::vector<TrialResidual> residuals;
    bool just_identified() const noexcept { return df <= 0; }
};

/// J = sum_g r_g^2 / sigma_g^2 for target column `target`, referred to
/// chi2 with m minus the number of sources allowed into that column.
inline OveridTestResult overid_test(const DesignSystem& sys, const Eigen::MatrixXd& probs,
                                    std::span<const double> sigma, int target) {
    const auto m = sys.trials();
    if (target < 0 || target >= sys.states()) throw ValidationError("test target column out of range");
    if (static_cast<Eigen::Index>(sigma.size()) != m)
        throw InferenceError("one residual standard error per trial is required");
    OveridTestResult out;
    out.target = target;
    const Eigen::VectorXd residual = sys.response.col(target) - sys.design * probs.col(target);
    int free = 0;
    for (Eigen::Index i = 0; i < sys.states(); ++i)
        if (sys.support(i, target)) ++free;
    out.df = static_cast<int>(m) - free;
    for (Eigen::Index g = 0; g < m; ++g) {
        const double s = sigma[static_cast<std::size_t>(g)];
        if (!(s > 0.0) || !std::isfinite(s))
            throw InferenceError("residual standard error for trial '" + sys.trial_labels[static_cast<std::size_t>(g)] +
                                 "' is zero or undefined");
        out.residuals.push_back({sys.trial_labels[static_cast<std::size_t>(g)], residual[g], s});
        out.statistic += residual[g] * residual[g] / (s * s);
    }
    if (out.df >= 1) out.p_value = chi_square_sf(out.statistic, out.df);
    return out;
}

/// Summaries -> transition matrix, reused by the bootstrap and the test.
struct TransitionPipeline {
    StateSpace space = StateSpace::outcome;
    Monotonicity monotonicity;
    SolveOptions solve;
    bool weighted = false;

    DesignSystem system(const SummaryFrequencies& s) const {
        auto sys = build_system(s, space, monotonicity);
        if (weighted) apply_arm_size_weights(sys, s);
        return sys;
    }
    TransitionMatrix operator()(const SummaryFrequencies& s) const { return solve_transitions(system(s), solve); }
};

/// How the per-trial residual is recomputed inside each bootstrap replicate.
enum class ResidualScale {
    fixed_theta,  ///< replicate frequencies with the original estimate
    refit,        ///< replicate frequencies with the replicate's own estimate
};

inline const char* to_string(ResidualScale r) noexcept {
    return r == ResidualScale::fixed_theta ? "fixed_theta" : "refit";
}

struct TransitionTestRun {
    DesignSystem system;
    TransitionMatrix fit;
    BootstrapResult boot;  ///< parameters: row-major Pi, then one residual per trial
    OveridTestResult test;
};

/// Fits the transition matrix, bootstraps it together with the per-trial
/// residuals of column `target`, and forms J from the same replicates.
inline TransitionTestRun run_overid_test(const MultiTrialDataset& data, const TransitionPipeline& pipeline,
                                         const BootstrapConfig& config, int target = -1,
                                         ResidualScale scale = ResidualScale::fixed_theta) {
    TransitionTestRun run;
    const auto summaries = summarize(data);
    run.system = pipeline.system(summaries);
    run.fit = solve_transitions(run.system, pipeline.solve);
    const auto k = run.system.states();
    const auto m = run.system.trials();
    if (target < 0) target = static_cast<int>(k) - 1;
    const Eigen::MatrixXd original = run.fit.probs;

    Estimator estimator = [&pipeline, &original, scale, target, k, m](const MultiTrialDataset& d) {
        const auto sys = pipeline.system(summarize(d));
        const auto trans = solve_transitions(sys, pipeline.solve);
        if (sys.trials() != m) throw EstimationError("trial count changed under resampling");
        Eigen::VectorXd out(k * k + m);
        for (Eigen::Index i = 0; i < k; ++i)
            for (Eigen::Index b = 0; b < k; ++b) out[i * k + b] = trans.probs(i, b);
        const Eigen::MatrixXd& probs = scale == ResidualScale::fixed_theta ? original : trans.probs;
        out.tail(m) = sys.response.col(target) - sys.design * probs.col(target);
        return out;
    };
    run.boot = bootstrap(data, estimator, config);
    std::vector<double> sigma(static_cast<std::size_t>(m));
    for (Eigen::Index g = 0; g < m; ++g) sigma[static_cast<std::size_t>(g)] = run.boot.estimate.se[k * k + g];
    run.test = overid_test(run.system, run.fit.probs, sigma, target);
    return run;
}

}  // namespace jointpo
