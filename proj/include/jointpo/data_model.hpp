#pragma once

// Multi-trial contingency data: cell counts per (arm, surrogate, outcome)
// and the conditional frequencies every estimator consumes.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "jointpo/errors.hpp"

namespace jointpo {

/// Dense cell indexing shared by every trial of a dataset.
/// Index = (arm * surrogate_levels + s) * outcome_levels + y.
struct CellLayout {
    int outcome_levels = 2;
    bool has_surrogate = false;

    int surrogate_levels() const noexcept { return has_surrogate ? 2 : 1; }
    std::size_t size() const noexcept {
        return static_cast<std::size_t>(2 * surrogate_levels() * outcome_levels);
    }
    std::size_t index(int arm, int s, int y) const noexcept {
        return static_cast<std::size_t>((arm * surrogate_levels() + s) * outcome_levels + y);
    }
    bool operator==(const CellLayout&) const = default;
};

struct TrialCellCounts {
    std::string label;
    std::vector<std::int64_t> counts;
    bool control_only = false;

    std::int64_t total() const {
        return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
    }
    std::int64_t arm_total(const CellLayout& layout, int arm) const {
        const auto per_arm = layout.size() / 2;
        const auto first = counts.begin() + static_cast<std::ptrdiff_t>(arm * per_arm);
        return std::accumulate(first, first + static_cast<std::ptrdiff_t>(per_arm), std::int64_t{0});
    }
    std::int64_t at(const CellLayout& layout, int arm, int s, int y) const {
        return counts[layout.index(arm, s, y)];
    }
};

/// Experimental trials in first-appearance order plus an optional
/// control-only target population.
struct MultiTrialDataset {
    CellLayout layout;
    std::vector<TrialCellCounts> trials;
    std::optional<TrialCellCounts> target;

    std::size_t trial_count() const noexcept { return trials.size(); }
};

struct ParseOptions {
    /// Label of the control-only target trial, if the file carries one.
    std::optional<std::string> target_label;
    /// Lower bound on the outcome cardinality (the observed maximum may be smaller).
    int min_outcome_levels = 2;
};

namespace detail {

inline std::string_view trim_cr(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(trim_cr(line.substr(start)));
            break;
        }
        fields.push_back(trim_cr(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return fields;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    std::int64_t value = 0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end || s.empty()) return std::nullopt;
    return value;
}

struct RawRow {
    std::string trial;
    int arm;
    int s;  // -1 when NA
    int y;
    std::int64_t count;
};

}  // namespace detail

/// Checks structural invariants: uniform layout, nonnegative counts, unique
/// labels, and a target trial without treated units.
inline void validate(const MultiTrialDataset& data) {
    if (data.layout.outcome_levels < 2) throw ValidationError("outcome cardinality must be at least 2");
    std::unordered_map<std::string, int> seen;
    auto check_trial = [&](const TrialCellCounts& t) {
        if (t.counts.size() != data.layout.size())
            throw SchemaError("trial '" + t.label + "' has a cell table of the wrong size");
        for (auto c : t.counts)
            if (c < 0) throw ValidationError("trial '" + t.label + "' has a negative count");
        if (seen[t.label]++ > 0) throw ValidationError("duplicate trial label '" + t.label + "'");
    };
    for (const auto& t : data.trials) check_trial(t);
    if (data.target) {
        check_trial(*data.target);
        if (data.target->arm_total(data.layout, 1) > 0)
            throw ValidationError("target trial '" + data.target->label +
                                  "' has treated units; a control-only target must have arm 1 empty");
    }
}

/// Reads the `trial,arm,s,y,count` CSV. Duplicate cells are summed; trial
/// order follows first appearance.
inline MultiTrialDataset parse_dataset(std::istream& in, const ParseOptions& options = {}) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError(1, "empty input; expected header 'trial,arm,s,y,count'");
    ++line_no;
    {
        std::string_view header = detail::trim_cr(line);
        if (header.size() >= 3 && static_cast<unsigned char>(header[0]) == 0xEF &&
            static_cast<unsigned char>(header[1]) == 0xBB && static_cast<unsigned char>(header[2]) == 0xBF)
            header.remove_prefix(3);
        if (header != "trial,arm,s,y,count")
            throw ParseError(1, "expected header 'trial,arm,s,y,count', got '" + std::string(header) + "'");
    }

    std::vector<detail::RawRow> rows;
    std::optional<bool> surrogate_present;
    int max_y = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto body = detail::trim_cr(line);
        if (body.empty()) continue;
        const auto fields = detail::split_commas(body);
        if (fields.size() != 5)
            throw ParseError(line_no, "expected 5 fields, found " + std::to_string(fields.size()));
        if (fields[0].empty()) throw ParseError(line_no, "empty trial label");

        detail::RawRow row;
        row.trial = std::string(fields[0]);
        const auto arm = detail::parse_int(fields[1]);
        if (!arm || (*arm != 0 && *arm != 1)) throw ParseError(line_no, "arm must be 0 or 1");
        row.arm = static_cast<int>(*arm);

        const bool s_missing = fields[2] == "NA";
        if (!surrogate_present) surrogate_present = !s_missing;
        if (*surrogate_present == s_missing)
            throw SchemaError("line " + std::to_string(line_no) +
                              ": surrogate column mixes NA and observed values");
        if (s_missing) {
            row.s = -1;
        } else {
            const auto s = detail::parse_int(fields[2]);
            if (!s || (*s != 0 && *s != 1)) throw ParseError(line_no, "s must be 0, 1 or NA");
            row.s = static_cast<int>(*s);
        }

        const auto y = detail::parse_int(fields[3]);
        if (!y || *y < 0 || *y > 1'000'000) throw ParseError(line_no, "y must be a nonnegative integer");
        row.y = static_cast<int>(*y);
        max_y = std::max(max_y, row.y);

        const auto count = detail::parse_int(fields[4]);
        if (!count) throw ParseError(line_no, "count must be a base-10 integer");
        if (*count < 0)
            throw ValidationError("line " + std::to_string(line_no) + ": negative count " +
                                  std::to_string(*count));
        row.count = *count;
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ParseError(line_no, "no data rows");

    MultiTrialDataset data;
    data.layout.has_surrogate = surrogate_present.value_or(false);
    data.layout.outcome_levels = std::max(options.min_outcome_levels, max_y + 1);

    std::vector<TrialCellCounts> ordered;
    std::unordered_map<std::string, std::size_t> position;
    for (const auto& row : rows) {
        auto [it, inserted] = position.try_emplace(row.trial, ordered.size());
        if (inserted) ordered.push_back(TrialCellCounts{row.trial, std::vector<std::int64_t>(data.layout.size(), 0)});
        auto& trial = ordered[it->second];
        trial.counts[data.layout.index(row.arm, row.s < 0 ? 0 : row.s, row.y)] += row.count;
    }
    for (auto& trial : ordered) {
        if (options.target_label && trial.label == *options.target_label) {
            trial.control_only = true;
            data.target = std::move(trial);
        } else {
            data.trials.push_back(std::move(trial));
        }
    }
    validate(data);
    return data;
}

inline MultiTrialDataset parse_dataset_file(const std::string& path, const ParseOptions& options = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open input file '" + path + "'");
    return parse_dataset(in, options);
}

/// Writes the canonical CSV (every cell, including zeros; target last).
inline void write_dataset(std::ostream& out, const MultiTrialDataset& data) {
    out << "trial,arm,s,y,count\n";
    auto emit = [&](const TrialCellCounts& t) {
        for (int arm = 0; arm < 2; ++arm)
            for (int s = 0; s < data.layout.surrogate_levels(); ++s)
                for (int y = 0; y < data.layout.outcome_levels; ++y) {
                    if (t.control_only && arm == 1) continue;
                    out << t.label << ',' << arm << ',';
                    if (data.layout.has_surrogate) out << s; else out << "NA";
                    out << ',' << y << ',' << t.at(data.layout, arm, s, y) << '\n';
                }
    };
    for (const auto& t : data.trials) emit(t);
    if (data.target) emit(*data.target);
}

/// One observed unit in long format.
struct UnitRecord {
    std::string trial;
    int arm = 0;
    std::optional<int> surrogate;
    int outcome = 0;
};

/// Aggregates unit-level rows into cell counts.
inline MultiTrialDataset aggregate_units(std::span<const UnitRecord> units, const ParseOptions& options = {}) {
    MultiTrialDataset data;
    if (units.empty()) throw ValidationError("no units to aggregate");
    data.layout.has_surrogate = units.front().surrogate.has_value();
    int max_y = 0;
    for (const auto& u : units) {
        if (u.surrogate.has_value() != data.layout.has_surrogate)
            throw SchemaError("surrogate presence differs between units");
        if (u.arm != 0 && u.arm != 1) throw ValidationError("arm must be 0 or 1");
        if (u.surrogate && *u.surrogate != 0 && *u.surrogate != 1) throw ValidationError("surrogate must be 0 or 1");
        if (u.outcome < 0) throw ValidationError("outcome must be nonnegative");
        max_y = std::max(max_y, u.outcome);
    }
    data.layout.outcome_levels = std::max(options.min_outcome_levels, max_y + 1);
    std::vector<TrialCellCounts> ordered;
    std::unordered_map<std::string, std::size_t> position;
    for (const auto& u : units) {
        auto [it, inserted] = position.try_emplace(u.trial, ordered.size());
        if (inserted) ordered.push_back(TrialCellCounts{u.trial, std::vector<std::int64_t>(data.layout.size(), 0)});
        ordered[it->second].counts[data.layout.index(u.arm, u.surrogate.value_or(0), u.outcome)] += 1;
    }
    for (auto& trial : ordered) {
        if (options.target_label && trial.label == *options.target_label) {
            trial.control_only = true;
            data.target = std::move(trial);
        } else {
            data.trials.push_back(std::move(trial));
        }
    }
    validate(data);
    return data;
}

/// Conditional frequencies of one trial. Composite vectors index the
/// (S, Y) state as s * k + y.
struct TrialSummary {
    std::string label;
    std::array<std::int64_t, 2> arm_sizes{};
    Eigen::VectorXd control_marginal;
    Eigen::VectorXd treated_marginal;
    Eigen::VectorXd control_surrogate;
    Eigen::VectorXd treated_surrogate;
    Eigen::VectorXd control_composite;
    Eigen::VectorXd treated_composite;
    std::vector<std::int64_t> counts;
    bool control_only = false;

    std::int64_t total() const noexcept { return arm_sizes[0] + arm_sizes[1]; }
};

struct SummaryFrequencies {
    CellLayout layout;
    std::vector<TrialSummary> trials;
    std::optional<TrialSummary> target;

    std::size_t trial_count() const noexcept { return trials.size(); }
    std::int64_t total_units() const {
        std::int64_t n = 0;
        for (const auto& t : trials) n += t.total();
        return n;
    }
};

namespace detail {

inline Eigen::VectorXd frequencies(const TrialCellCounts& t, const CellLayout& layout, int arm,
                                   bool by_surrogate, bool by_outcome) {
    const int ns = layout.surrogate_levels();
    const int k = layout.outcome_levels;
    const int width = (by_surrogate ? ns : 1) * (by_outcome ? k : 1);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(width);
    for (int s = 0; s < ns; ++s)
        for (int y = 0; y < k; ++y) {
            const int slot = (by_surrogate ? s : 0) * (by_outcome ? k : 1) + (by_outcome ? y : 0);
            counts[slot] += static_cast<double>(t.at(layout, arm, s, y));
        }
    const double total = static_cast<double>(t.arm_total(layout, arm));
    for (int i = 0; i < width; ++i) counts[i] = counts[i] / total;
    return counts;
}

inline TrialSummary summarize_trial(const TrialCellCounts& t, const CellLayout& layout) {
    TrialSummary s;
    s.label = t.label;
    s.control_only = t.control_only;
    s.counts = t.counts;
    s.arm_sizes = {t.arm_total(layout, 0), t.arm_total(layout, 1)};
    if (s.arm_sizes[0] <= 0)
        throw EstimationError("trial '" + t.label + "' has no units in arm 0 (control)");
    s.control_marginal = frequencies(t, layout, 0, false, true);
    if (layout.has_surrogate) {
        s.control_surrogate = frequencies(t, layout, 0, true, false);
        s.control_composite = frequencies(t, layout, 0, true, true);
    }
    if (t.control_only) return s;
    if (s.arm_sizes[1] <= 0)
        throw EstimationError("trial '" + t.label + "' has no units in arm 1 (treated)");
    s.treated_marginal = frequencies(t, layout, 1, false, true);
    if (layout.has_surrogate) {
        s.treated_surrogate = frequencies(t, layout, 1, true, false);
        s.treated_composite = frequencies(t, layout, 1, true, true);
    }
    return s;
}

}  // namespace detail

/// Per-trial conditional frequencies; the target trial gets control
/// frequencies only.
inline SummaryFrequencies summarize(const MultiTrialDataset& data) {
    SummaryFrequencies out;
    out.layout = data.layout;
    out.trials.reserve(data.trials.size());
    for (const auto& t : data.trials) out.trials.push_back(detail::summarize_trial(t, data.layout));
    if (data.target) out.target = detail::summarize_trial(*data.target, data.layout);
    return out;
}

}  // namespace jointpo
