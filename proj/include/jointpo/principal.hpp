#pragma once

// Principal stratification on a binary surrogate S: principal scores,
// stratum-specific outcome parameters, and PSACE estimates under the
// stratum-invariance route (method 1) and the composite (S, Y) transition
// route (methods 2-4).

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jointpo/data_model.hpp"
#include "jointpo/errors.hpp"
#include "jointpo/transition.hpp"

namespace jointpo {

/// Stratum (S0 = a, S1 = b) is stored at index 2a + b.
inline constexpr int stratum_index(int s0, int s1) noexcept { return 2 * s0 + s1; }
inline const std::array<const char*, 4> kStratumNames = {"00", "01", "10", "11"};

struct PrincipalScores {
    std::string trial;
    std::array<double, 4> delta{};  ///< P(S0 = a, S1 = b | trial) at stratum_index(a, b)
    bool clipped = false;
    bool negative_compliers = false;  ///< raw delta_01 < 0 before any clipping
};

struct PrincipalScoreSet {
    std::vector<PrincipalScores> trials;
    std::vector<std::string> warnings;
};

/// Scores under S1 >= S0: delta_11 = P(S=1|A=0), delta_01 = P(S=1|A=1) - delta_11,
/// delta_00 = 1 - delta_11 - delta_01, delta_10 = 0.
inline PrincipalScoreSet principal_scores(const SummaryFrequencies& summaries, bool clip_negative = false) {
    if (!summaries.layout.has_surrogate) throw ValidationError("principal scores need a surrogate column");
    PrincipalScoreSet out;
    for (const auto& t : summaries.trials) {
        PrincipalScores s;
        s.trial = t.label;
        const double always = t.control_surrogate[1];
        const double compliers = t.treated_surrogate[1] - always;
        s.delta[stratum_index(1, 1)] = always;
        s.delta[stratum_index(0, 1)] = compliers;
        s.delta[stratum_index(0, 0)] = 1.0 - always - compliers;
        s.delta[stratum_index(1, 0)] = 0.0;
        if (compliers < 0.0) {
            s.negative_compliers = true;
            std::ostringstream msg;
            msg << "trial '" << t.label << "': estimated delta_01 = " << compliers
                << " < 0 (P(S=1|A=1) < P(S=1|A=0)); S1 >= S0 looks violated";
            out.warnings.push_back(msg.str());
            if (clip_negative) {
                const double rest = s.delta[0] + s.delta[3];
                s.delta[stratum_index(0, 1)] = 0.0;
                if (rest > 0.0) {
                    s.delta[0] /= rest;
                    s.delta[3] /= rest;
                }
                s.clipped = true;
            }
        }
        out.trials.push_back(s);
    }
    return out;
}

/// P(Y1 = 1 | stratum) and P(Y0 = 1 | stratum); stratum 10 stays NaN.
struct StratumOutcomeParams {
    std::array<double, 4> treated;
    std::array<double, 4> control;
    std::array<bool, 4> treated_out_of_range{};
    std::array<bool, 4> control_out_of_range{};

    StratumOutcomeParams() {
        treated.fill(std::numeric_limits<double>::quiet_NaN());
        control.fill(std::numeric_limits<double>::quiet_NaN());
    }
};

struct PsaceTable {
    int method = 1;
    std::string assumptions;
    std::vector<std::string> trials;
    std::vector<std::array<std::optional<double>, 4>> estimates;  ///< per trial, per stratum
};

/// Per-trial view of the two pooled cells method 1 assumes trial-invariant.
struct PooledCellDiagnostic {
    std::string trial;
    std::optional<double> treated_given_s0;   ///< P(Y=1 | S=0, A=1) in this trial
    std::optional<double> control_given_s1;   ///< P(Y=1 | S=1, A=0) in this trial
};

struct Method1Result {
    PrincipalScoreSet scores;
    StratumOutcomeParams params;
    PsaceTable psace;
    RankDiagnostics treated_design;  ///< columns (delta_01, delta_11)
    RankDiagnostics control_design;  ///< columns (delta_00, delta_01)
    std::vector<PooledCellDiagnostic> pooled_cells;
    std::vector<std::string> warnings;

    /// (P(Y0=1|00), P(Y0=1|01), P(Y0=1|11), P(Y1=1|00), P(Y1=1|01), P(Y1=1|11),
    ///  PSACE_00, PSACE_01, PSACE_11).
    Eigen::VectorXd parameter_vector() const {
        Eigen::VectorXd v(9);
        const int order[3] = {0, 1, 3};
        for (int j = 0; j < 3; ++j) {
            v[j] = params.control[order[j]];
            v[3 + j] = params.treated[order[j]];
            v[6 + j] = params.treated[order[j]] - params.control[order[j]];
        }
        return v;
    }
};

namespace detail {

inline RankDiagnostics two_column_rank(const Eigen::MatrixXd& x, double tol) {
    RankDiagnostics d;
    d.tolerance = tol;
    singular_spectrum(x, d.singular_values, d.condition_ratio);
    d.satisfied = x.rows() >= x.cols() && d.condition_ratio > tol;
    return d;
}

}  // namespace detail

/// Least-squares route under stratum invariance of Y^a and S1 >= S0.
inline Method1Result method1_estimate(const SummaryFrequencies& summaries, bool clip_negative = false,
                                      double tol_ratio = 1e-8) {
    const auto& layout = summaries.layout;
    if (!layout.has_surrogate) throw ValidationError("method 1 needs a surrogate column");
    if (layout.outcome_levels != 2) throw ValidationError("method 1 needs a binary outcome");
    const auto m = static_cast<Eigen::Index>(summaries.trial_count());
    if (m < 2) throw IdentificationError("method 1 needs at least two trials (got " + std::to_string(m) + ")");

    Method1Result out;
    out.scores = principal_scores(summaries, clip_negative);
    out.warnings = out.scores.warnings;

    // Step 2: pooled cells identified by monotonicity alone.
    double t_s0_y1 = 0, t_s0 = 0, c_s1_y1 = 0, c_s1 = 0;
    for (const auto& t : summaries.trials) {
        const double n1 = static_cast<double>(t.arm_sizes[1]);
        const double n0 = static_cast<double>(t.arm_sizes[0]);
        const double a = n1 * t.treated_composite[1], b = n1 * t.treated_surrogate[0];
        const double c = n0 * t.control_composite[3], d = n0 * t.control_surrogate[1];
        t_s0_y1 += a; t_s0 += b; c_s1_y1 += c; c_s1 += d;
        PooledCellDiagnostic diag{t.label, std::nullopt, std::nullopt};
        if (b > 0) diag.treated_given_s0 = a / b;
        if (d > 0) diag.control_given_s1 = c / d;
        out.pooled_cells.push_back(diag);
    }
    if (t_s0 <= 0) throw IdentificationError("no treated units with S = 0 in any trial; P(Y1=1 | S0=0,S1=0) is not estimable");
    if (c_s1 <= 0) throw IdentificationError("no control units with S = 1 in any trial; P(Y0=1 | S0=1,S1=1) is not estimable");
    const double treated_00 = t_s0_y1 / t_s0;
    const double control_11 = c_s1_y1 / c_s1;

    // Step 3: two regressions across trials.
    Eigen::MatrixXd x_treated(m, 2), x_control(m, 2);
    Eigen::VectorXd y_treated(m), y_control(m);
    for (Eigen::Index g = 0; g < m; ++g) {
        const auto& t = summaries.trials[static_cast<std::size_t>(g)];
        const auto& d = out.scores.trials[static_cast<std::size_t>(g)].delta;
        x_treated(g, 0) = d[stratum_index(0, 1)];
        x_treated(g, 1) = d[stratum_index(1, 1)];
        y_treated[g] = t.treated_marginal[1] - treated_00 * d[stratum_index(0, 0)];
        x_control(g, 0) = d[stratum_index(0, 0)];
        x_control(g, 1) = d[stratum_index(0, 1)];
        y_control[g] = t.control_marginal[1] - control_11 * d[stratum_index(1, 1)];
    }
    out.treated_design = detail::two_column_rank(x_treated, tol_ratio);
    out.control_design = detail::two_column_rank(x_control, tol_ratio);
    if (!out.treated_design.satisfied) {
        std::ostringstream msg;
        msg << "treated-outcome regression design (delta_01, delta_11) is not full column rank "
            << "(sigma_min/sigma_max = " << out.treated_design.condition_ratio << ")";
        throw IdentificationError(msg.str());
    }
    if (!out.control_design.satisfied) {
        std::ostringstream msg;
        msg << "control-outcome regression design (delta_00, delta_01) is not full column rank "
            << "(sigma_min/sigma_max = " << out.control_design.condition_ratio << ")";
        throw IdentificationError(msg.str());
    }
    const Eigen::Vector2d beta = x_treated.householderQr().solve(y_treated);
    const Eigen::Vector2d gamma = x_control.householderQr().solve(y_control);

    auto& p = out.params;
    p.treated[stratum_index(0, 0)] = treated_00;
    p.treated[stratum_index(0, 1)] = beta[0];
    p.treated[stratum_index(1, 1)] = beta[1];
    p.control[stratum_index(0, 0)] = gamma[0];
    p.control[stratum_index(0, 1)] = gamma[1];
    p.control[stratum_index(1, 1)] = control_11;
    for (int s : {0, 1, 3}) {
        p.treated_out_of_range[s] = p.treated[s] < 0.0 || p.treated[s] > 1.0;
        p.control_out_of_range[s] = p.control[s] < 0.0 || p.control[s] > 1.0;
        if (p.treated_out_of_range[s] || p.control_out_of_range[s])
            out.warnings.push_back(std::string("stratum ") + kStratumNames[s] + ": outcome probability outside [0, 1]");
    }

    // Step 4: one PSACE per stratum, shared by every trial.
    std::array<std::optional<double>, 4> effect;
    for (int s : {0, 1, 3}) effect[s] = p.treated[s] - p.control[s];
    out.psace.method = 1;
    out.psace.assumptions = "stratum-invariant outcomes; S1>=S0";
    for (const auto& t : summaries.trials) {
        out.psace.trials.push_back(t.label);
        out.psace.estimates.push_back(effect);
    }
    return out;
}

enum class CellStatus { identified, structural_zero, unavailable };

inline const char* to_string(CellStatus s) noexcept {
    switch (s) {
        case CellStatus::identified: return "identified";
        case CellStatus::structural_zero: return "structural_zero";
        case CellStatus::unavailable: return "unavailable";
    }
    return "?";
}

/// P(S0 = a, S1 = b, Y0 = c, Y1 = d | trial), flattened at cell_index(a, b, c, d).
struct FourWayJoint {
    std::string trial;
    std::array<double, 16> prob{};
    std::array<CellStatus, 16> status{};

    static constexpr int cell_index(int s0, int s1, int y0, int y1) noexcept {
        return ((s0 * 2 + s1) * 2 + y0) * 2 + y1;
    }
    double at(int s0, int s1, int y0, int y1) const { return prob[static_cast<std::size_t>(cell_index(s0, s1, y0, y1))]; }
};

struct CompositeResult {
    int method = 4;
    Monotonicity monotonicity;
    DesignSystem system;
    TransitionMatrix transitions;
    std::vector<FourWayJoint> joints;
    PsaceTable psace;
    std::vector<std::string> warnings;
};

inline std::string monotonicity_label(Monotonicity mono) {
    if (mono.surrogate && mono.outcome) return "S1>=S0,Y1>=Y0";
    if (mono.surrogate) return "S1>=S0";
    if (mono.outcome) return "Y1>=Y0";
    return "none";
}

/// Stratum mass at or below this is treated as empty.
inline constexpr double kStratumMassFloor = 1e-12;

namespace detail {

inline FourWayJoint four_way_joint(const std::string& label, const TransitionMatrix& trans,
                                   const Eigen::VectorXd& control_composite) {
    FourWayJoint j;
    j.trial = label;
    for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 2; ++c)
            for (int b = 0; b < 2; ++b)
                for (int d = 0; d < 2; ++d) {
                    const int from = a * 2 + c;
                    const int to = b * 2 + d;
                    const auto cell = static_cast<std::size_t>(FourWayJoint::cell_index(a, b, c, d));
                    if (!trans.support(from, to)) {
                        j.prob[cell] = 0.0;
                        j.status[cell] = CellStatus::structural_zero;
                        continue;
                    }
                    const double pi = trans.probs(from, to);
                    j.prob[cell] = std::isfinite(pi) ? pi * control_composite[from]
                                                     : std::numeric_limits<double>::quiet_NaN();
                    j.status[cell] = std::isfinite(pi) ? CellStatus::identified : CellStatus::unavailable;
                }
    return j;
}

inline CompositeResult composite_estimate(const SummaryFrequencies& summaries, Monotonicity mono, int method,
                                          SolveOptions options) {
    const auto& layout = summaries.layout;
    if (!layout.has_surrogate) throw ValidationError("composite PSACE methods need a surrogate column");
    if (layout.outcome_levels != 2) throw ValidationError("composite PSACE methods need a binary outcome");
    const auto m = summaries.trial_count();

    CompositeResult out;
    out.method = method;
    out.monotonicity = mono;
    if (!mono.any() && m < 4)
        throw IdentificationError("composite transitions without monotonicity need m >= 4 trials and a "
                                  "full-column-rank 4-state design (got m = " + std::to_string(m) + ")");
    out.system = build_system(summaries, StateSpace::composite, mono);
    const auto diag = check_rank(out.system, options.tol_ratio);

    if (!diag.satisfied && !options.force) {
        std::string prefix;
        if (!mono.any())
            prefix = "composite design must have full column rank with m >= 4: ";
        else if (mono.surrogate && mono.outcome)
            prefix = "relaxed rank condition under S1>=S0 and Y1>=Y0 fails (needs full-column-rank "
                     "designs (P(0,0), P(0,1)) and (P(0,0), P(1,0)), m >= 2): ";
        else
            prefix = "composite design under " + monotonicity_label(mono) + " needs m >= 4 and full rank: ";
        if (!options.allow_partial) throw IdentificationError(prefix + diag.reason);
        // Partial mode still needs the reduced designs with at most two sources.
        for (const auto& col : diag.columns)
            if (col.role == ColumnRole::solved && col.sources.size() <= 2 && !col.satisfied)
                throw IdentificationError(prefix + diag.reason);
    }
    out.transitions = solve_transitions(out.system, options);
    out.warnings = out.transitions.warnings;

    out.psace.method = method;
    out.psace.assumptions = "composite transitions; " + monotonicity_label(mono);
    for (std::size_t g = 0; g < summaries.trials.size(); ++g) {
        const auto& t = summaries.trials[g];
        out.joints.push_back(four_way_joint(t.label, out.transitions, t.control_composite));
        const auto& joint = out.joints.back();
        std::array<std::optional<double>, 4> row;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                if (mono.surrogate && a == 1 && b == 0) continue;
                double mass = 0.0, effect = 0.0;
                bool available = true, negative = false;
                for (int c = 0; c < 2; ++c)
                    for (int d = 0; d < 2; ++d) {
                        const auto cell = static_cast<std::size_t>(FourWayJoint::cell_index(a, b, c, d));
                        if (joint.status[cell] == CellStatus::unavailable) available = false;
                        mass += joint.prob[cell];
                        effect += (d - c) * joint.prob[cell];
                        if (joint.prob[cell] < 0.0) negative = true;
                    }
                if (!available || !(mass > kStratumMassFloor)) continue;
                if (negative)
                    out.warnings.push_back("trial '" + t.label + "', stratum " + kStratumNames[stratum_index(a, b)] +
                                           ": negative joint cells inside a positive-mass stratum");
                row[stratum_index(a, b)] = effect / mass;
            }
        out.psace.trials.push_back(t.label);
        out.psace.estimates.push_back(row);
    }
    return out;
}

}  // namespace detail

/// Composite (S, Y) transition route with an optional monotonicity mask.
/// Without monotonicity this needs m >= 4; with both it needs m >= 2.
inline CompositeResult method4_estimate(const SummaryFrequencies& summaries, Monotonicity mono = {},
                                        SolveOptions options = {}) {
    options.allow_partial = false;
    return detail::composite_estimate(summaries, mono, 4, options);
}

enum class MonotoneVariant {
    both_monotone,    ///< method 2: S1 >= S0 and Y1 >= Y0
    outcome_monotone  ///< method 3: Y1 >= Y0 only
};

/// Masked least-squares variants. Method 3 keeps whatever columns its
/// reduced designs identify and marks the remaining cells unavailable.
inline CompositeResult monotone_variant_estimate(const SummaryFrequencies& summaries, MonotoneVariant which,
                                                 SolveOptions options = {}) {
    if (which == MonotoneVariant::both_monotone) {
        options.allow_partial = false;
        return detail::composite_estimate(summaries, Monotonicity{true, true}, 2, options);
    }
    options.allow_partial = true;
    return detail::composite_estimate(summaries, Monotonicity{false, true}, 3, options);
}

/// P(S0 = a, S1 = b | trial) from a four-way joint.
inline std::array<double, 4> surrogate_joint(const FourWayJoint& j) {
    std::array<double, 4> out{};
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c)
                for (int d = 0; d < 2; ++d) out[static_cast<std::size_t>(2 * a + b)] += j.at(a, b, c, d);
    return out;
}

/// P(Y0 = c, Y1 = d | trial) from a four-way joint.
inline std::array<double, 4> outcome_joint(const FourWayJoint& j) {
    std::array<double, 4> out{};
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c)
                for (int d = 0; d < 2; ++d) out[static_cast<std::size_t>(2 * c + d)] += j.at(a, b, c, d);
    return out;
}

}  // namespace jointpo
