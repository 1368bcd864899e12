#pragma once

// Shared domain types and structural validation rules.
//
// Units: time is always months. Survival is a probability in [0, 1] in memory
// and a percentage in [0, 100] in files (see io.hpp).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace kmlead {

inline constexpr std::size_t kCurvePoints = 500;
inline constexpr const char* kSchemaTag = "# km-lead v1";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InputError : Error {
    using Error::Error;
};

struct ParseError : Error {
    ParseError(std::string file, std::size_t line, std::size_t column, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + what),
          file(std::move(file)), line(line), column(column) {}
    std::string file;
    std::size_t line;
    std::size_t column;
};

struct SchemaError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------
struct StudyId {
    std::string trial_name;
    std::optional<std::string> subfigure_qualifier;

    // "CheckMate-227" or "CheckMate-227 (Fig 1A)".
    std::string rendered() const {
        if (!subfigure_qualifier) return trial_name;
        return trial_name + " (" + *subfigure_qualifier + ")";
    }

    static StudyId parse(const std::string& s) {
        if (!s.empty() && s.back() == ')') {
            // the qualifier opens at the parenthesis balancing the final one
            int depth = 0;
            for (std::size_t i = s.size(); i-- > 0;) {
                if (s[i] == ')') ++depth;
                else if (s[i] == '(' && --depth == 0) {
                    if (i >= 2 && s[i - 1] == ' ') return StudyId{s.substr(0, i - 1), s.substr(i + 1, s.size() - i - 2)};
                    break;
                }
            }
        }
        return StudyId{s, std::nullopt};
    }

    friend bool operator==(const StudyId&, const StudyId&) = default;
    friend auto operator<=>(const StudyId&, const StudyId&) = default;
};

// ---------------------------------------------------------------------------
// Curves, risk tables, IPD
// ---------------------------------------------------------------------------
struct CurvePoint {
    double time = 0.0;      // months
    double survival = 1.0;  // probability
    friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct KMCurve {
    StudyId study;
    std::string arm_label;
    std::vector<CurvePoint> points;

    std::size_t point_count() const { return points.size(); }
    double end_time() const { return points.empty() ? 0.0 : points.back().time; }

    // Piecewise-linear evaluation; flat extrapolation outside the trace.
    double survival_at(double t) const {
        if (points.empty()) return 1.0;
        if (t <= points.front().time) return points.front().survival;
        if (t >= points.back().time) return points.back().survival;
        auto it = std::upper_bound(points.begin(), points.end(), t,
                                   [](double x, const CurvePoint& p) { return x < p.time; });
        const auto& hi = *it;
        const auto& lo = *(it - 1);
        double w = (t - lo.time) / (hi.time - lo.time);
        return lo.survival + w * (hi.survival - lo.survival);
    }

    friend bool operator==(const KMCurve&, const KMCurve&) = default;
};

struct RiskArm {
    std::string arm_label;
    std::vector<long> counts;
    friend bool operator==(const RiskArm&, const RiskArm&) = default;
};

struct RiskTable {
    StudyId study;
    std::vector<double> time_grid;
    std::vector<RiskArm> arms;

    const RiskArm* find_arm(const std::string& label) const {
        for (const auto& a : arms)
            if (a.arm_label == label) return &a;
        return nullptr;
    }

    friend bool operator==(const RiskTable&, const RiskTable&) = default;
};

struct IpdRecord {
    double time = 0.0;  // Y_i, months
    int event = 0;      // delta_i
    friend bool operator==(const IpdRecord&, const IpdRecord&) = default;
};

struct ReconstructedIPD {
    StudyId study;
    std::string arm_label;
    std::vector<IpdRecord> records;

    std::size_t n() const { return records.size(); }
    friend bool operator==(const ReconstructedIPD&, const ReconstructedIPD&) = default;
};

// ---------------------------------------------------------------------------
// Baseline characteristics
// ---------------------------------------------------------------------------
enum class CovariateKind { continuous_mean_sd, continuous_median_range, binary_proportion };

inline const char* to_string(CovariateKind k) {
    switch (k) {
        case CovariateKind::continuous_mean_sd: return "continuous_mean_sd";
        case CovariateKind::continuous_median_range: return "continuous_median_range";
        case CovariateKind::binary_proportion: return "binary_proportion";
    }
    return "?";
}

inline std::optional<CovariateKind> parse_covariate_kind(const std::string& s) {
    if (s == "continuous_mean_sd") return CovariateKind::continuous_mean_sd;
    if (s == "continuous_median_range") return CovariateKind::continuous_median_range;
    if (s == "binary_proportion") return CovariateKind::binary_proportion;
    return std::nullopt;
}

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
    friend bool operator==(const MeanSd&, const MeanSd&) = default;
};

struct MedianRange {
    double median = 0.0;
    double min = 0.0;
    double max = 0.0;
    friend bool operator==(const MedianRange&, const MedianRange&) = default;
};

struct Proportion {
    double p = 0.0;
    friend bool operator==(const Proportion&, const Proportion&) = default;
};

struct CovariateSummary {
    std::string name;
    std::variant<MeanSd, MedianRange, Proportion> values;

    CovariateKind kind() const { return static_cast<CovariateKind>(values.index()); }
    friend bool operator==(const CovariateSummary&, const CovariateSummary&) = default;
};

struct BaselineProfile {
    StudyId study;
    std::string arm_label;
    long n = 0;
    std::vector<CovariateSummary> covariates;

    const CovariateSummary* find(const std::string& name) const {
        for (const auto& c : covariates)
            if (c.name == name) return &c;
        return nullptr;
    }

    friend bool operator==(const BaselineProfile&, const BaselineProfile&) = default;
};

// ---------------------------------------------------------------------------
// Validation reports
// ---------------------------------------------------------------------------
enum class Severity { error, warning };

struct Finding {
    Severity severity = Severity::error;
    std::string code;
    std::string location;
    std::string message;
    friend bool operator==(const Finding&, const Finding&) = default;
};

struct ValidationReport {
    std::vector<Finding> findings;

    void error(std::string code, std::string location, std::string message) {
        findings.push_back({Severity::error, std::move(code), std::move(location), std::move(message)});
    }
    void warning(std::string code, std::string location, std::string message) {
        findings.push_back({Severity::warning, std::move(code), std::move(location), std::move(message)});
    }
    void merge(const ValidationReport& other) {
        findings.insert(findings.end(), other.findings.begin(), other.findings.end());
    }

    bool has_errors() const {
        return std::any_of(findings.begin(), findings.end(),
                           [](const Finding& f) { return f.severity == Severity::error; });
    }
    bool export_blocked() const { return has_errors(); }
    bool empty() const { return findings.empty(); }

    std::size_t count(const std::string& code) const {
        return static_cast<std::size_t>(std::count_if(
            findings.begin(), findings.end(), [&](const Finding& f) { return f.code == code; }));
    }

    std::string to_text() const {
        std::string out;
        for (const auto& f : findings) {
            out += (f.severity == Severity::error ? "error" : "warning");
            out += " [" + f.code + "] " + f.location + ": " + f.message + "\n";
        }
        return out;
    }

    friend bool operator==(const ValidationReport&, const ValidationReport&) = default;
};

// Thrown when an export is refused; carries the full report.
struct ExportBlocked : Error {
    explicit ExportBlocked(ValidationReport r)
        : Error("export blocked: " + std::to_string(r.findings.size()) + " finding(s)"),
          report(std::move(r)) {}
    ValidationReport report;
};

// Rule codes. Each error maps to exactly one of these.
namespace rule {
inline constexpr const char* non_monotone_at_risk = "non_monotone_at_risk";
inline constexpr const char* ragged_arrays = "ragged_arrays";
inline constexpr const char* grid_not_increasing = "grid_not_increasing";
inline constexpr const char* grid_start = "grid_start";
inline constexpr const char* negative_count = "negative_count";
inline constexpr const char* duplicate_arm = "duplicate_arm";
inline constexpr const char* start_point = "start_point";
inline constexpr const char* time_not_increasing = "time_not_increasing";
inline constexpr const char* monotonicity = "monotonicity";
inline constexpr const char* point_count = "point_count";
inline constexpr const char* survival_range = "survival_range";
inline constexpr const char* unmatched_arm = "unmatched_arm";
inline constexpr const char* duplicate_identifier = "duplicate_identifier";
inline constexpr const char* terminal_month = "terminal_month";
inline constexpr const char* unresolved_conflict = "unresolved_conflict";
// warnings
inline constexpr const char* start_inserted = "start_inserted";
inline constexpr const char* monotonicity_clamped = "monotonicity_clamped";
inline constexpr const char* value_clamped = "value_clamped";
inline constexpr const char* duplicate_time = "duplicate_time";
}  // namespace rule

inline ValidationReport validate_risk_table(const RiskTable& rt) {
    ValidationReport rep;
    const std::string where = rt.study.rendered();

    const auto& g = rt.time_grid;
    if (g.empty() || g.front() != 0.0) {
        rep.error(rule::grid_start, where, "time grid must start at 0");
    }
    for (std::size_t i = 1; i < g.size(); ++i) {
        if (!(g[i] > g[i - 1])) {
            rep.error(rule::grid_not_increasing, where + " t[" + std::to_string(i) + "]",
                      "time grid not strictly increasing");
            break;
        }
    }

    std::set<std::string> seen;
    for (const auto& arm : rt.arms) {
        const std::string loc = where + " / " + arm.arm_label;
        if (!seen.insert(arm.arm_label).second) {
            rep.error(rule::duplicate_arm, loc, "arm label appears twice in one study");
        }
        if (arm.counts.size() != g.size()) {
            rep.error(rule::ragged_arrays, loc,
                      "ragged arrays: " + std::to_string(arm.counts.size()) + " counts for " +
                          std::to_string(g.size()) + " time points");
        }
        for (std::size_t i = 0; i < arm.counts.size(); ++i) {
            if (arm.counts[i] < 0) {
                rep.error(rule::negative_count, loc + " [" + std::to_string(i) + "]",
                          "negative at-risk count");
            }
        }
        for (std::size_t i = 1; i < arm.counts.size(); ++i) {
            if (arm.counts[i] > arm.counts[i - 1]) {
                rep.error(rule::non_monotone_at_risk, loc + " [" + std::to_string(i) + "]",
                          "non-monotone at-risk: " + std::to_string(arm.counts[i - 1]) + " -> " +
                              std::to_string(arm.counts[i]));
            }
        }
    }
    return rep;
}

inline ValidationReport validate_curve(const KMCurve& c) {
    ValidationReport rep;
    const std::string where = c.study.rendered() + " / " + c.arm_label;

    if (c.points.size() != kCurvePoints) {
        rep.error(rule::point_count, where,
                  "point count " + std::to_string(c.points.size()) + " != " +
                      std::to_string(kCurvePoints));
    }
    if (c.points.empty() || c.points.front().time != 0.0 || c.points.front().survival != 1.0) {
        rep.error(rule::start_point, where, "curve must start at (0, 100)");
    }
    for (std::size_t i = 0; i < c.points.size(); ++i) {
        double s = c.points[i].survival;
        if (!(s >= 0.0 && s <= 1.0) || !std::isfinite(c.points[i].time) || c.points[i].time < 0) {
            rep.error(rule::survival_range, where + " [" + std::to_string(i) + "]",
                      "point outside time >= 0, survival in [0, 100]");
            break;
        }
    }
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        if (!(c.points[i].time > c.points[i - 1].time)) {
            rep.error(rule::time_not_increasing, where + " [" + std::to_string(i) + "]",
                      "time not strictly increasing");
            break;
        }
    }
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        if (c.points[i].survival > c.points[i - 1].survival) {
            rep.error(rule::monotonicity, where + " [" + std::to_string(i) + "]",
                      "monotonicity: survival rises at t=" + std::to_string(c.points[i].time));
        }
    }
    return rep;
}

// One-to-one alignment of curves and risk-table arms by study-arm key, plus
// uniqueness of rendered study identifiers.
inline ValidationReport validate_bundle(const std::vector<KMCurve>& curves,
                                        const std::vector<RiskTable>& tables) {
    ValidationReport rep;

    std::map<std::string, const RiskTable*> by_study;
    for (const auto& t : tables) {
        auto id = t.study.rendered();
        if (!by_study.emplace(id, &t).second) {
            rep.error(rule::duplicate_identifier, id, "duplicate identifier: study rendered twice");
        }
    }

    std::set<std::pair<std::string, std::string>> curve_keys;
    for (const auto& c : curves) {
        auto key = std::make_pair(c.study.rendered(), c.arm_label);
        if (!curve_keys.insert(key).second) {
            rep.error(rule::duplicate_identifier, key.first + " / " + key.second,
                      "duplicate identifier: curve key appears twice");
        }
        auto it = by_study.find(key.first);
        if (it == by_study.end() || it->second->find_arm(c.arm_label) == nullptr) {
            rep.error(rule::unmatched_arm, key.first + " / " + key.second,
                      "unmatched arm: curve has no risk-table arm");
        }
    }
    for (const auto& t : tables) {
        for (const auto& a : t.arms) {
            auto key = std::make_pair(t.study.rendered(), a.arm_label);
            if (!curve_keys.count(key)) {
                rep.error(rule::unmatched_arm, key.first + " / " + key.second,
                          "unmatched arm: risk-table arm has no curve");
            }
        }
    }
    return rep;
}

}  // namespace kmlead
