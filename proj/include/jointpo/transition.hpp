#pragma once

// Least-squares identification of the trial-invariant transition matrix
// P(post-treatment state | control state) from per-trial marginals.
//
// For every trial g the treated marginal satisfies
//     R[g, b] = sum_i M[g, i] * Pi[i, b],
// where M holds the control marginals. Stacking the trials gives one linear
// regression per target state b, solved by an orthogonal decomposition.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jointpo/data_model.hpp"
#include "jointpo/errors.hpp"

namespace jointpo {

enum class StateSpace { outcome, surrogate, composite };

inline const char* to_string(StateSpace s) noexcept {
    switch (s) {
        case StateSpace::outcome: return "outcome";
        case StateSpace::surrogate: return "surrogate";
        case StateSpace::composite: return "composite";
    }
    return "?";
}

/// Structural zeros requested on the transition: S1 >= S0 and/or Y1 >= Y0.
struct Monotonicity {
    bool surrogate = false;
    bool outcome = false;

    bool any() const noexcept { return surrogate || outcome; }
    bool operator==(const Monotonicity&) const = default;
};

using SupportMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct DesignSystem {
    Eigen::MatrixXd design;    ///< m x k, control marginals per trial
    Eigen::MatrixXd response;  ///< m x k, treated marginals per trial
    std::vector<std::string> state_labels;
    std::vector<std::string> trial_labels;
    SupportMask support;       ///< k x k, true where Pi[i, b] may be nonzero
    StateSpace space = StateSpace::outcome;
    Monotonicity monotonicity;
    int outcome_levels = 2;
    Eigen::VectorXd weights;   ///< per-trial regression weights; empty means uniform

    Eigen::Index trials() const noexcept { return design.rows(); }
    Eigen::Index states() const noexcept { return design.cols(); }
    bool masked() const { return !support.all(); }
};

namespace detail {

inline std::string state_label(StateSpace space, int state, int k) {
    switch (space) {
        case StateSpace::outcome: return "y=" + std::to_string(state);
        case StateSpace::surrogate: return "s=" + std::to_string(state);
        case StateSpace::composite:
            return "s=" + std::to_string(state / k) + ",y=" + std::to_string(state % k);
    }
    return {};
}

}  // namespace detail

/// Support mask for a state space. Composite states are ordered (s, y) with
/// y fastest: (0,0), (0,1), ..., (1,0), (1,1), ...
inline SupportMask monotone_support(StateSpace space, int outcome_levels, Monotonicity mono) {
    const int k = outcome_levels;
    const int states = space == StateSpace::composite ? 2 * k : (space == StateSpace::surrogate ? 2 : k);
    SupportMask mask = SupportMask::Constant(states, states, true);
    for (int from = 0; from < states; ++from)
        for (int to = 0; to < states; ++to) {
            int s_from = 0, s_to = 0, y_from = 0, y_to = 0;
            if (space == StateSpace::composite) {
                s_from = from / k; y_from = from % k; s_to = to / k; y_to = to % k;
            } else if (space == StateSpace::surrogate) {
                s_from = from; s_to = to;
            } else {
                y_from = from; y_to = to;
            }
            if (mono.surrogate && s_to < s_from) mask(from, to) = false;
            if (mono.outcome && y_to < y_from) mask(from, to) = false;
        }
    return mask;
}

/// Stacks the experimental trials' marginals for the chosen state space.
inline DesignSystem build_system(const SummaryFrequencies& summaries, StateSpace space, Monotonicity mono = {}) {
    const auto& layout = summaries.layout;
    if (space != StateSpace::outcome && !layout.has_surrogate)
        throw ValidationError(std::string("state space '") + to_string(space) +
                              "' requires a surrogate column; the data has s = NA");
    if (space == StateSpace::outcome && mono.any())
        throw ValidationError("monotonicity masks apply to the surrogate and composite state spaces only");
    if (space == StateSpace::surrogate && mono.outcome)
        throw ValidationError("outcome monotonicity needs the composite state space");
    const auto m = static_cast<Eigen::Index>(summaries.trial_count());
    if (m < 2)
        throw IdentificationError("at least two experimental trials are required (got " + std::to_string(m) + ")");

    const int k = layout.outcome_levels;
    const int states = space == StateSpace::composite ? 2 * k : (space == StateSpace::surrogate ? 2 : k);

    DesignSystem sys;
    sys.space = space;
    sys.monotonicity = mono;
    sys.outcome_levels = k;
    sys.design.resize(m, states);
    sys.response.resize(m, states);
    for (Eigen::Index g = 0; g < m; ++g) {
        const auto& t = summaries.trials[static_cast<std::size_t>(g)];
        sys.trial_labels.push_back(t.label);
        switch (space) {
            case StateSpace::outcome:
                sys.design.row(g) = t.control_marginal.transpose();
                sys.response.row(g) = t.treated_marginal.transpose();
                break;
            case StateSpace::surrogate:
                sys.design.row(g) = t.control_surrogate.transpose();
                sys.response.row(g) = t.treated_surrogate.transpose();
                break;
            case StateSpace::composite:
                sys.design.row(g) = t.control_composite.transpose();
                sys.response.row(g) = t.treated_composite.transpose();
                break;
        }
    }
    for (int s = 0; s < states; ++s) sys.state_labels.push_back(detail::state_label(space, s, k));
    sys.support = monotone_support(space, k, mono);
    return sys;
}

/// Effective-sample-size weights 1 / (1/n_{g,0} + 1/n_{g,1}). Opt-in only.
inline void apply_arm_size_weights(DesignSystem& sys, const SummaryFrequencies& summaries) {
    sys.weights.resize(sys.trials());
    for (Eigen::Index g = 0; g < sys.trials(); ++g) {
        const auto& sizes = summaries.trials[static_cast<std::size_t>(g)].arm_sizes;
        sys.weights[g] = 1.0 / (1.0 / static_cast<double>(sizes[0]) + 1.0 / static_cast<double>(sizes[1]));
    }
}

enum class ColumnRole { solved, derived };

struct ColumnDiagnostics {
    int target = 0;
    std::vector<int> sources;
    std::vector<double> singular_values;
    double condition_ratio = 0.0;
    bool satisfied = false;
    ColumnRole role = ColumnRole::solved;
};

struct RankDiagnostics {
    std::vector<double> singular_values;  ///< of the full design, nonincreasing
    double condition_ratio = 0.0;         ///< sigma_min / sigma_max, 0 when m < k
    double tolerance = 1e-8;
    bool masked = false;
    bool satisfied = false;
    std::vector<ColumnDiagnostics> columns;
    std::string reason;  ///< empty when satisfied
};

namespace detail {

inline void singular_spectrum(const Eigen::MatrixXd& x, std::vector<double>& values, double& ratio) {
    values.clear();
    if (x.cols() == 0) {
        ratio = 1.0;
        return;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
    const auto& sv = svd.singularValues();
    values.assign(sv.data(), sv.data() + sv.size());
    while (values.size() < static_cast<std::size_t>(x.cols())) values.push_back(0.0);
    ratio = (values.front() > 0.0) ? values.back() / values.front() : 0.0;
}

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<int>& cols) {
    Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
    return out;
}

/// Last target column reachable from every source; its entries follow from
/// the row-sum constraint once the other columns are known.
inline std::optional<int> complement_column(const SupportMask& support) {
    for (Eigen::Index b = support.cols() - 1; b >= 0; --b)
        if (support.col(b).all()) return static_cast<int>(b);
    return std::nullopt;
}

}  // namespace detail

/// Rank diagnostics for the full design and, on masked systems, for each
/// reduced design restricted to the sources allowed into a target column.
inline RankDiagnostics check_rank(const DesignSystem& sys, double tol_ratio = 1e-8) {
    RankDiagnostics diag;
    diag.tolerance = tol_ratio;
    diag.masked = sys.masked();
    detail::singular_spectrum(sys.design, diag.singular_values, diag.condition_ratio);

    const auto m = sys.trials();
    const auto k = sys.states();
    std::ostringstream reason;

    if (!diag.masked) {
        for (Eigen::Index b = 0; b < k; ++b) {
            ColumnDiagnostics col;
            col.target = static_cast<int>(b);
            for (Eigen::Index i = 0; i < k; ++i) col.sources.push_back(static_cast<int>(i));
            col.singular_values = diag.singular_values;
            col.condition_ratio = diag.condition_ratio;
            col.satisfied = m >= k && diag.condition_ratio > tol_ratio;
            diag.columns.push_back(std::move(col));
        }
        diag.satisfied = m >= k && diag.condition_ratio > tol_ratio;
        if (m < k)
            reason << "m < k (" << m << " < " << k << "): full column rank needs at least as many trials as states";
        else if (!diag.satisfied)
            reason << "design matrix is not full column rank (sigma_min/sigma_max = " << diag.condition_ratio
                   << " <= " << tol_ratio << ")";
        diag.reason = reason.str();
        return diag;
    }

    const auto complement = detail::complement_column(sys.support);
    diag.satisfied = true;
    for (Eigen::Index b = 0; b < k; ++b) {
        ColumnDiagnostics col;
        col.target = static_cast<int>(b);
        for (Eigen::Index i = 0; i < k; ++i)
            if (sys.support(i, b)) col.sources.push_back(static_cast<int>(i));
        if (complement && *complement == b) {
            col.role = ColumnRole::derived;
            col.satisfied = true;
            col.condition_ratio = 1.0;
            diag.columns.push_back(std::move(col));
            continue;
        }
        const auto reduced = detail::select_columns(sys.design, col.sources);
        detail::singular_spectrum(reduced, col.singular_values, col.condition_ratio);
        const auto width = static_cast<Eigen::Index>(col.sources.size());
        col.satisfied = m >= width && col.condition_ratio > tol_ratio;
        if (!col.satisfied) {
            diag.satisfied = false;
            if (!reason.str().empty()) reason << "; ";
            reason << "target '" << sys.state_labels[static_cast<std::size_t>(b)] << "': ";
            if (m < width)
                reason << "m < " << width << " allowed sources (" << m << " < " << width << ")";
            else
                reason << "reduced design not full column rank (sigma_min/sigma_max = " << col.condition_ratio << ")";
        }
        diag.columns.push_back(std::move(col));
    }
    diag.reason = reason.str();
    return diag;
}

struct SolveOptions {
    bool project_simplex = false;
    /// Solve rank-deficient columns with the minimum-norm solution instead of failing.
    bool force = false;
    /// Mark columns whose reduced design fails the rank check as unidentified
    /// (NaN) instead of failing. Masked systems only.
    bool allow_partial = false;
    double tol_ratio = 1e-8;
};

struct TransitionMatrix {
    Eigen::MatrixXd probs;  ///< probs(i, b) = P(post state b | control state i)
    SupportMask support;
    std::vector<std::string> state_labels;
    bool projected = false;
    std::vector<bool> identified;  ///< per target column
    RankDiagnostics diagnostics;
    std::vector<std::string> warnings;
    double max_row_sum_error = 0.0;  ///< over fully identified rows

    Eigen::Index states() const noexcept { return probs.rows(); }
    bool fully_identified() const {
        return std::all_of(identified.begin(), identified.end(), [](bool b) { return b; });
    }
};

/// Euclidean projection of v onto the probability simplex restricted to the
/// entries where `allowed` is true; other entries become 0.
inline Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v, const std::vector<bool>& allowed) {
    std::vector<double> sorted;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (allowed[static_cast<std::size_t>(i)]) sorted.push_back(v[i]);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
    if (sorted.empty()) return out;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double cumulative = 0.0;
    double shift = 0.0;
    for (std::size_t j = 0; j < sorted.size(); ++j) {
        cumulative += sorted[j];
        const double candidate = (cumulative - 1.0) / static_cast<double>(j + 1);
        if (sorted[j] - candidate > 0.0) shift = candidate;
    }
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (allowed[static_cast<std::size_t>(i)]) out[i] = std::max(v[i] - shift, 0.0);
    return out;
}

inline Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v) {
    return project_to_simplex(v, std::vector<bool>(static_cast<std::size_t>(v.size()), true));
}

namespace detail {

inline Eigen::MatrixXd least_squares(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, bool full_rank) {
    if (full_rank) return x.householderQr().solve(y);
    return x.completeOrthogonalDecomposition().solve(y);
}

}  // namespace detail

/// Per-column least squares of the treated marginals on the control
/// marginals. Unmasked systems share one decomposition; masked systems solve
/// each target on its reduced design and fill the complement column from the
/// row sums.
inline TransitionMatrix solve_transitions(const DesignSystem& sys, const SolveOptions& options = {}) {
    TransitionMatrix out;
    out.support = sys.support;
    out.state_labels = sys.state_labels;
    out.diagnostics = check_rank(sys, options.tol_ratio);
    const auto m = sys.trials();
    const auto k = sys.states();
    out.probs = Eigen::MatrixXd::Zero(k, k);
    out.identified.assign(static_cast<std::size_t>(k), true);

    Eigen::MatrixXd x = sys.design;
    Eigen::MatrixXd y = sys.response;
    if (sys.weights.size() == m) {
        const Eigen::VectorXd root = sys.weights.cwiseSqrt();
        x = root.asDiagonal() * x;
        y = root.asDiagonal() * y;
    }

    const auto& diag = out.diagnostics;
    if (!diag.masked) {
        if (!diag.satisfied) {
            if (!options.force)
                throw IdentificationError("full-column-rank condition fails: " + diag.reason);
            out.warnings.push_back("forced solve on a rank-deficient design (" + diag.reason +
                                   "); minimum-norm solution reported");
        }
        out.probs = detail::least_squares(x, y, diag.satisfied);
    } else {
        std::optional<int> derived;
        for (const auto& col : diag.columns) {
            if (col.role == ColumnRole::derived) {
                derived = col.target;
                continue;
            }
            const auto b = col.target;
            if (!col.satisfied) {
                if (options.allow_partial && !options.force) {
                    out.identified[static_cast<std::size_t>(b)] = false;
                    for (int i : col.sources) out.probs(i, b) = std::numeric_limits<double>::quiet_NaN();
                    continue;
                }
                if (!options.force)
                    throw IdentificationError("full-column-rank condition fails on the masked system: " +
                                              diag.reason);
            }
            const auto reduced = detail::select_columns(x, col.sources);
            const Eigen::VectorXd coef = detail::least_squares(reduced, y.col(b), col.satisfied);
            for (std::size_t j = 0; j < col.sources.size(); ++j)
                out.probs(col.sources[j], b) = coef[static_cast<Eigen::Index>(j)];
        }
        if (options.force && !diag.satisfied)
            out.warnings.push_back("forced solve on rank-deficient reduced designs (" + diag.reason + ")");
        if (derived) {
            const int c = *derived;
            bool complete = true;
            for (Eigen::Index i = 0; i < k; ++i) {
                double rest = 0.0;
                for (Eigen::Index b = 0; b < k; ++b)
                    if (b != c && sys.support(i, b)) rest += out.probs(i, b);
                out.probs(i, c) = 1.0 - rest;
                if (std::isnan(rest)) complete = false;
            }
            out.identified[static_cast<std::size_t>(c)] = complete;
        }
        if (!out.fully_identified())
            out.warnings.push_back("partial identification: " + diag.reason);
    }

    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index b = 0; b < k; ++b)
            if (!sys.support(i, b)) out.probs(i, b) = 0.0;

    bool outside = false;
    for (Eigen::Index i = 0; i < k; ++i) {
        const double sum = out.probs.row(i).sum();
        if (std::isfinite(sum)) out.max_row_sum_error = std::max(out.max_row_sum_error, std::abs(sum - 1.0));
        for (Eigen::Index b = 0; b < k; ++b) {
            const double p = out.probs(i, b);
            if (std::isfinite(p) && (p < 0.0 || p > 1.0)) outside = true;
        }
    }
    if (out.max_row_sum_error > 1e-10)
        out.warnings.push_back("transition rows deviate from 1 by up to " + std::to_string(out.max_row_sum_error));
    if (outside && !options.project_simplex)
        out.warnings.push_back("transition estimates outside [0, 1] reported unconstrained");

    if (options.project_simplex) {
        for (Eigen::Index i = 0; i < k; ++i) {
            const Eigen::VectorXd row = out.probs.row(i).transpose();
            if (!row.allFinite()) continue;
            std::vector<bool> allowed(static_cast<std::size_t>(k));
            for (Eigen::Index b = 0; b < k; ++b) allowed[static_cast<std::size_t>(b)] = sys.support(i, b);
            out.probs.row(i) = project_to_simplex(row, allowed).transpose();
        }
        out.projected = true;
    }
    return out;
}

/// Residuals R[:, b] - M * Pi[:, b] per trial (unweighted).
inline Eigen::MatrixXd transition_residuals(const DesignSystem& sys, const Eigen::MatrixXd& probs) {
    return sys.response - sys.design * probs;
}

/// joint(a, b) = Pi(a, b) * marginal(a): P(control state a, treated state b).
inline Eigen::MatrixXd joint_from_transitions(const Eigen::MatrixXd& probs, const Eigen::VectorXd& control_marginal) {
    if (control_marginal.size() != probs.rows())
        throw ValidationError("control marginal length does not match the transition matrix");
    return control_marginal.asDiagonal() * probs;
}

inline Eigen::MatrixXd joint_from_transitions(const TransitionMatrix& trans, const Eigen::VectorXd& control_marginal) {
    return joint_from_transitions(trans.probs, control_marginal);
}

struct JointDistributionTable {
    std::vector<std::string> trial_labels;
    std::vector<Eigen::MatrixXd> joints;
    bool has_negative = false;
};

/// Control marginals of the requested state space, one row per trial.
inline JointDistributionTable joint_table(const TransitionMatrix& trans, const DesignSystem& sys) {
    JointDistributionTable table;
    table.trial_labels = sys.trial_labels;
    for (Eigen::Index g = 0; g < sys.trials(); ++g) {
        table.joints.push_back(joint_from_transitions(trans, sys.design.row(g).transpose()));
        if ((table.joints.back().array() < 0.0).any()) table.has_negative = true;
    }
    return table;
}

/// Binary-outcome estimands read off one joint table. Each is empty when its
/// denominator vanishes.
struct DerivedEstimands {
    std::optional<double> treatment_harm_rate;
    std::optional<double> treatment_benefit_rate;
    std::optional<double> persuasion_rate;
    std::optional<double> probability_sufficient;
    std::optional<double> probability_necessary;
};

inline DerivedEstimands derived_estimands(const Eigen::MatrixXd& joint, int favorable = 1) {
    if (joint.rows() != 2 || joint.cols() != 2)
        throw ValidationError("derived estimands need a binary outcome (2 x 2 joint table)");
    if (favorable != 0 && favorable != 1) throw ValidationError("favorable label must be 0 or 1");
    const int f = favorable;
    const int u = 1 - favorable;
    DerivedEstimands e;
    e.treatment_harm_rate = joint(f, u);
    e.treatment_benefit_rate = joint(u, f);
    const double unfavorable_control = joint(u, u) + joint(u, f);
    if (unfavorable_control > 0.0) {
        e.persuasion_rate = joint(u, f) / unfavorable_control;
        e.probability_sufficient = e.persuasion_rate;
    }
    const double favorable_treated = joint(u, f) + joint(f, f);
    if (favorable_treated > 0.0) e.probability_necessary = joint(u, f) / favorable_treated;
    return e;
}

}  // namespace jointpo
