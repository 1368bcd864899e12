#pragma once

// Human-steered digitization: three-point calibration, trace transformation,
// 500-point standardization, arm-name matching, two-source risk-table
// adjudication, and the final export gate.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kmlead/core.hpp"
#include "kmlead/csv.hpp"

namespace kmlead {

struct CalibrationError : Error {
    using Error::Error;
};

struct PixelPoint {
    double u = 0.0;  // x, left to right
    double v = 0.0;  // y, top-left origin (grows downward)
    friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

struct CalibrationAnchors {
    PixelPoint origin_px;  // -> (0, 0)
    PixelPoint xmax_px;    // -> (max_months, 0)
    PixelPoint ytop_px;    // -> (0, 100)
    double max_months = 0.0;
    friend bool operator==(const CalibrationAnchors&, const CalibrationAnchors&) = default;
};

// Calibrated data point: time in months, survival in percent.
struct DataPoint {
    double time = 0.0;
    double survival_pct = 0.0;
    friend bool operator==(const DataPoint&, const DataPoint&) = default;
};

// t = a*u + b*v + c,  s = d*u + e*v + f
struct AffineMap {
    double a = 1, b = 0, c = 0;
    double d = 0, e = 1, f = 0;

    DataPoint apply(PixelPoint p) const { return {a * p.u + b * p.v + c, d * p.u + e * p.v + f}; }

    double determinant() const { return a * e - b * d; }

    AffineMap inverse() const {
        double det = determinant();
        if (det == 0.0) throw CalibrationError("affine map is singular");
        AffineMap inv;
        inv.a = e / det;
        inv.b = -b / det;
        inv.d = -d / det;
        inv.e = a / det;
        inv.c = -(inv.a * c + inv.b * f);
        inv.f = -(inv.d * c + inv.e * f);
        return inv;
    }
};

namespace detail {

// Solves [[u_i, v_i, 1]] x = rhs for three anchors by Cramer's rule.
inline std::array<double, 3> solve3(const std::array<PixelPoint, 3>& p, std::array<double, 3> rhs) {
    auto det3 = [](double m00, double m01, double m02, double m10, double m11, double m12,
                   double m20, double m21, double m22) {
        return m00 * (m11 * m22 - m12 * m21) - m01 * (m10 * m22 - m12 * m20) +
               m02 * (m10 * m21 - m11 * m20);
    };
    double D = det3(p[0].u, p[0].v, 1, p[1].u, p[1].v, 1, p[2].u, p[2].v, 1);
    double Dx = det3(rhs[0], p[0].v, 1, rhs[1], p[1].v, 1, rhs[2], p[2].v, 1);
    double Dy = det3(p[0].u, rhs[0], 1, p[1].u, rhs[1], 1, p[2].u, rhs[2], 1);
    double Dz = det3(p[0].u, p[0].v, rhs[0], p[1].u, p[1].v, rhs[1], p[2].u, p[2].v, rhs[2]);
    return {Dx / D, Dy / D, Dz / D};
}

}  // namespace detail

inline AffineMap solve_affine(const CalibrationAnchors& anchors) {
    if (!(anchors.max_months > 0.0) || !std::isfinite(anchors.max_months))
        throw InputError("max_months must be positive");

    const std::array<PixelPoint, 3> px{anchors.origin_px, anchors.xmax_px, anchors.ytop_px};
    for (const auto& p : px)
        if (!std::isfinite(p.u) || !std::isfinite(p.v)) throw InputError("anchor pixel not finite");

    double e1u = px[1].u - px[0].u, e1v = px[1].v - px[0].v;
    double e2u = px[2].u - px[0].u, e2v = px[2].v - px[0].v;
    double cross = e1u * e2v - e1v * e2u;
    double scale = std::hypot(e1u, e1v) * std::hypot(e2u, e2v);
    if (scale == 0.0 || std::abs(cross) <= 1e-9 * scale)
        throw CalibrationError("calibration anchors are collinear");

    auto t = detail::solve3(px, {0.0, anchors.max_months, 0.0});
    auto s = detail::solve3(px, {0.0, 0.0, 100.0});
    AffineMap m{t[0], t[1], t[2], s[0], s[1], s[2]};
    if (m.determinant() == 0.0 || !std::isfinite(m.determinant()))
        throw CalibrationError("calibration produced a singular map");
    return m;
}

inline std::vector<DataPoint> transform_trace(const std::vector<PixelPoint>& trace,
                                              const AffineMap& map) {
    if (trace.empty()) throw InputError("empty trace");
    std::vector<DataPoint> out;
    out.reserve(trace.size());
    for (const auto& p : trace) out.push_back(map.apply(p));
    return out;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------
inline constexpr double kClampTolerancePct = 0.5;

struct StandardizedCurve {
    KMCurve curve;
    ValidationReport report;
};

inline StandardizedCurve standardize_curve(const std::vector<DataPoint>& input, StudyId study = {},
                                           std::string arm = {}) {
    ValidationReport rep;
    const std::string where = study.rendered() + " / " + arm;

    // stable sort by time, then keep the last point of each duplicate time
    std::vector<std::pair<std::size_t, DataPoint>> idx;
    idx.reserve(input.size());
    for (std::size_t i = 0; i < input.size(); ++i) {
        const auto& p = input[i];
        if (!std::isfinite(p.time) || !std::isfinite(p.survival_pct))
            throw InputError("non-finite trace point");
        idx.emplace_back(i, p);
    }
    std::stable_sort(idx.begin(), idx.end(),
                     [](const auto& x, const auto& y) { return x.second.time < y.second.time; });

    std::vector<DataPoint> pts;
    for (const auto& [i, p] : idx) {
        if (!pts.empty() && pts.back().time == p.time) {
            pts.back() = p;
            rep.warning(rule::duplicate_time, where, "duplicate time collapsed (kept last)");
        } else {
            pts.push_back(p);
        }
    }

    if (pts.size() < 2) throw InputError("fewer than 2 distinct times in trace");
    double t_max = pts.back().time;
    if (!(t_max > 0.0)) throw InputError("trace maximum time must be positive");

    // calibration jitter: times just below zero and survival just outside [0, 100]
    std::vector<DataPoint> kept;
    for (auto p : pts) {
        if (p.time < 0.0) {
            rep.warning(rule::value_clamped, where, "point with negative time dropped");
            continue;
        }
        if (p.survival_pct > 100.0 || p.survival_pct < 0.0) {
            p.survival_pct = std::clamp(p.survival_pct, 0.0, 100.0);
            rep.warning(rule::value_clamped, where, "survival clamped into [0, 100]");
        }
        kept.push_back(p);
    }
    pts = std::move(kept);

    if (pts.empty() || pts.front().time != 0.0) {
        pts.insert(pts.begin(), DataPoint{0.0, 100.0});
        rep.warning(rule::start_inserted, where, "start inserted: (0, 100) added");
    } else if (pts.front().survival_pct != 100.0) {
        pts.front().survival_pct = 100.0;
        rep.warning(rule::start_inserted, where, "start inserted: survival at t=0 set to 100");
    }
    if (pts.size() < 2) throw InputError("fewer than 2 distinct times in trace");

    double running_min = pts.front().survival_pct;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        double s = pts[i].survival_pct;
        if (s <= running_min) {
            running_min = s;
            continue;
        }
        double rise = s - running_min;
        if (rise <= kClampTolerancePct) {
            pts[i].survival_pct = running_min;
            rep.warning(rule::monotonicity_clamped, where,
                        "survival rise of " + csv::format_number(rise) + " at t=" +
                            csv::format_number(pts[i].time) + " clamped");
        } else {
            rep.error(rule::monotonicity, where,
                      "monotonicity: survival rises by " + csv::format_number(rise) + " at t=" +
                          csv::format_number(pts[i].time));
        }
    }

    KMCurve curve{std::move(study), std::move(arm), {}};
    curve.points.reserve(kCurvePoints);
    std::size_t j = 0;
    const double n1 = static_cast<double>(kCurvePoints - 1);
    for (std::size_t i = 0; i < kCurvePoints; ++i) {
        double t = i == kCurvePoints - 1 ? t_max : t_max * (static_cast<double>(i) / n1);
        while (j + 1 < pts.size() && pts[j + 1].time < t) ++j;
        double pct;
        if (j + 1 >= pts.size()) {
            pct = pts.back().survival_pct;
        } else if (pts[j + 1].time == t) {
            pct = pts[j + 1].survival_pct;
        } else if (pts[j].time == t) {
            pct = pts[j].survival_pct;
        } else {
            const auto& lo = pts[j];
            const auto& hi = pts[j + 1];
            double w = (t - lo.time) / (hi.time - lo.time);
            pct = lo.survival_pct + w * (hi.survival_pct - lo.survival_pct);
        }
        curve.points.push_back({t, pct / 100.0});
    }
    return {std::move(curve), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Arm matching
// ---------------------------------------------------------------------------
enum class MatchMethod { confirmed, exact, fuzzy, color_fallback };

inline const char* to_string(MatchMethod m) {
    switch (m) {
        case MatchMethod::confirmed: return "confirmed";
        case MatchMethod::exact: return "exact";
        case MatchMethod::fuzzy: return "fuzzy";
        case MatchMethod::color_fallback: return "color_fallback";
    }
    return "?";
}

struct ArmPair {
    std::string curve_label;
    std::string table_label;
    MatchMethod method = MatchMethod::exact;
    friend bool operator==(const ArmPair&, const ArmPair&) = default;
};

struct ArmMapping {
    std::vector<ArmPair> pairs;
    std::vector<std::string> unmatched_curves;
    std::vector<std::string> unmatched_tables;
    std::vector<std::string> ambiguous;  // curve labels with tied fuzzy candidates

    const ArmPair* for_curve(const std::string& label) const {
        for (const auto& p : pairs)
            if (p.curve_label == label) return &p;
        return nullptr;
    }
};

inline constexpr std::size_t kFuzzyLengthGap = 5;
inline constexpr double kFuzzySimilarity = 0.8;

// lowercase; [+/·,.-] and other punctuation become spaces; whitespace collapsed
inline std::string normalize_label(const std::string& s) {
    std::string spaced;
    spaced.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        if (c == 0xC2 && i + 1 < s.size() && static_cast<unsigned char>(s[i + 1]) == 0xB7) {
            spaced.push_back(' ');  // U+00B7 middle dot
            ++i;
        } else if (std::ispunct(c) || std::isspace(c)) {
            spaced.push_back(' ');
        } else {
            spaced.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    std::string out;
    for (char c : spaced) {
        if (c == ' ' && (out.empty() || out.back() == ' ')) continue;
        out.push_back(c);
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline std::size_t length_gap(const std::string& a, const std::string& b) {
    return a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
}

// Returns the similarity score if the pair passes the fuzzy gate, else nullopt.
inline std::optional<double> fuzzy_score(const std::string& norm_a, const std::string& norm_b) {
    if (norm_a.empty() || norm_b.empty()) return std::nullopt;
    if (length_gap(norm_a, norm_b) > kFuzzyLengthGap) return std::nullopt;
    double longest = static_cast<double>(std::max(norm_a.size(), norm_b.size()));
    double sim = 1.0 - static_cast<double>(edit_distance(norm_a, norm_b)) / longest;
    bool contained = norm_a.find(norm_b) != std::string::npos || norm_b.find(norm_a) != std::string::npos;
    if (contained || sim >= kFuzzySimilarity) return sim;
    return std::nullopt;
}

inline ArmMapping match_arms(const std::vector<std::string>& curve_labels,
                             const std::vector<std::string>& table_labels,
                             const std::map<std::string, std::string>& confirmed = {},
                             const std::map<std::string, std::string>& colors = {}) {
    if (curve_labels.empty() || table_labels.empty()) throw InputError("match_arms: labels must be nonempty");

    ArmMapping out;
    std::set<std::string> used_curve, used_table;
    const std::set<std::string> table_set(table_labels.begin(), table_labels.end());

    auto take = [&](const std::string& c, const std::string& t, MatchMethod m) {
        out.pairs.push_back({c, t, m});
        used_curve.insert(c);
        used_table.insert(t);
    };

    // (1) user-confirmed
    for (const auto& c : curve_labels) {
        auto it = confirmed.find(c);
        if (it != confirmed.end() && table_set.count(it->second) && !used_table.count(it->second))
            take(c, it->second, MatchMethod::confirmed);
    }

    // (2) exact after normalization; only when the normalized form is unique
    std::map<std::string, std::vector<std::string>> table_by_norm;
    for (const auto& t : table_labels) table_by_norm[normalize_label(t)].push_back(t);
    for (const auto& c : curve_labels) {
        if (used_curve.count(c)) continue;
        auto it = table_by_norm.find(normalize_label(c));
        if (it == table_by_norm.end()) continue;
        std::vector<std::string> free;
        for (const auto& t : it->second)
            if (!used_table.count(t)) free.push_back(t);
        if (free.size() == 1) take(c, free.front(), MatchMethod::exact);
    }

    // (3) fuzzy, best-score-first, ties left unmatched
    struct Cand {
        std::string c, t;
        double score;
    };
    std::vector<Cand> cands;
    for (const auto& c : curve_labels) {
        if (used_curve.count(c)) continue;
        for (const auto& t : table_labels) {
            if (used_table.count(t)) continue;
            if (auto s = fuzzy_score(normalize_label(c), normalize_label(t))) cands.push_back({c, t, *s});
        }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
    std::set<std::string> blocked;
    for (const auto& k : cands) {
        if (used_curve.count(k.c) || used_table.count(k.t) || blocked.count(k.c)) continue;
        bool tie = false;
        for (const auto& o : cands) {
            if (&o == &k || o.score != k.score) continue;
            if (used_curve.count(o.c) || used_table.count(o.t)) continue;
            if (o.c == k.c || o.t == k.t) tie = true;
        }
        if (tie) {
            blocked.insert(k.c);
            if (std::find(out.ambiguous.begin(), out.ambiguous.end(), k.c) == out.ambiguous.end())
                out.ambiguous.push_back(k.c);
            continue;
        }
        take(k.c, k.t, MatchMethod::fuzzy);
    }

    // (4) color label fallback
    for (const auto& c : curve_labels) {
        if (used_curve.count(c)) continue;
        auto it = colors.find(c);
        if (it == colors.end()) continue;
        auto norm = normalize_label(it->second);
        for (const auto& t : table_labels) {
            if (!used_table.count(t) && normalize_label(t) == norm) {
                take(c, t, MatchMethod::color_fallback);
                break;
            }
        }
    }

    for (const auto& c : curve_labels)
        if (!used_curve.count(c)) out.unmatched_curves.push_back(c);
    for (const auto& t : table_labels)
        if (!used_table.count(t)) out.unmatched_tables.push_back(t);
    return out;
}

// ---------------------------------------------------------------------------
// Two-source risk-table adjudication
// ---------------------------------------------------------------------------
enum class SourceTag { primary_extractor, fallback_extractor, manual };

inline const char* to_string(SourceTag s) {
    switch (s) {
        case SourceTag::primary_extractor: return "primary_extractor";
        case SourceTag::fallback_extractor: return "fallback_extractor";
        case SourceTag::manual: return "manual";
    }
    return "?";
}

inline std::optional<SourceTag> parse_source_tag(const std::string& s) {
    if (s == "primary_extractor") return SourceTag::primary_extractor;
    if (s == "fallback_extractor") return SourceTag::fallback_extractor;
    if (s == "manual") return SourceTag::manual;
    return std::nullopt;
}

struct CandidateTable {
    SourceTag source_tag = SourceTag::manual;
    RiskTable payload;  // may violate RiskTable invariants
    std::optional<double> confidence;
};

enum class Resolution { primary, fallback, unresolved };

inline const char* to_string(Resolution r) {
    switch (r) {
        case Resolution::primary: return "primary";
        case Resolution::fallback: return "fallback";
        case Resolution::unresolved: return "unresolved";
    }
    return "?";
}

struct CellDiff {
    std::string arm_label;
    std::size_t index = 0;
    long primary_value = 0;
    long fallback_value = 0;
    long resolved_value = 0;
    Resolution resolution = Resolution::primary;
    std::string reason;
    friend bool operator==(const CellDiff&, const CellDiff&) = default;
};

struct AdjudicationResult {
    RiskTable table;
    std::vector<CellDiff> diffs;
    ValidationReport report;
};

// Cells at which a row rises relative to its own previous cell.
inline std::vector<bool> monotonicity_violations(const std::vector<long>& row) {
    std::vector<bool> v(row.size(), false);
    for (std::size_t i = 1; i < row.size(); ++i) v[i] = row[i] > row[i - 1];
    return v;
}

inline AdjudicationResult adjudicate_tables(const CandidateTable& primary, const CandidateTable& fallback) {
    const auto& a = primary.payload;
    const auto& b = fallback.payload;
    if (a.arms.size() != b.arms.size()) throw InputError("adjudicate: candidate tables have different arm sets");
    if (a.time_grid.size() != b.time_grid.size())
        throw InputError("adjudicate: candidate tables have different grid lengths");

    AdjudicationResult res;
    res.table.study = a.study;
    res.table.time_grid = a.time_grid;

    if (a.time_grid != b.time_grid) {
        bool a_ok = std::is_sorted(a.time_grid.begin(), a.time_grid.end()) &&
                    std::adjacent_find(a.time_grid.begin(), a.time_grid.end()) == a.time_grid.end();
        if (!a_ok) res.table.time_grid = b.time_grid;
        res.diffs.push_back({"<time grid>", 0, 0, 0, 0, a_ok ? Resolution::primary : Resolution::fallback,
                             a_ok ? "time grids differ; primary grid is valid"
                                  : "time grids differ; primary grid not increasing"});
    }

    for (const auto& arm_a : a.arms) {
        const RiskArm* arm_b = nullptr;
        for (const auto& cand : b.arms)
            if (normalize_label(cand.arm_label) == normalize_label(arm_a.arm_label)) arm_b = &cand;
        if (!arm_b) throw InputError("adjudicate: arm '" + arm_a.arm_label + "' missing from fallback table");
        if (arm_b->counts.size() != arm_a.counts.size())
            throw InputError("adjudicate: arm '" + arm_a.arm_label + "' has different lengths");

        const auto& ra = arm_a.counts;
        const auto& rb = arm_b->counts;
        const std::size_t n = ra.size();
        auto viol_a = monotonicity_violations(ra);
        auto viol_b = monotonicity_violations(rb);

        std::vector<bool> differs(n);
        for (std::size_t i = 0; i < n; ++i) differs[i] = ra[i] != rb[i];

        RiskArm out{arm_a.arm_label, ra};
        for (std::size_t i = 0; i < n; ++i) {
            const std::string loc = a.study.rendered() + " / " + arm_a.arm_label + " [" + std::to_string(i) + "]";
            if (viol_a[i] && viol_b[i]) {
                res.report.error(rule::unresolved_conflict, loc,
                                 "unresolved conflict: both sources violate monotonicity; manual entry required");
                res.diffs.push_back({arm_a.arm_label, i, ra[i], rb[i], ra[i], Resolution::unresolved,
                                     "both sources non-monotone"});
                continue;
            }
            if (!differs[i] && !viol_a[i]) continue;

            Resolution r;
            std::string why;
            if (viol_a[i] && !viol_b[i]) {
                r = Resolution::fallback;
                why = "primary violates monotonicity";
            } else if (viol_b[i] && !viol_a[i]) {
                r = Resolution::primary;
                why = "fallback violates monotonicity";
            } else {
                bool isolated = !(i > 0 && differs[i - 1]) && !(i + 1 < n && differs[i + 1]);
                long mag = std::abs(ra[i] - rb[i]);
                if (isolated && mag <= 1) {
                    r = Resolution::primary;
                    why = "minor isolated discrepancy";
                } else if (mag > 1) {
                    r = Resolution::fallback;
                    why = "discrepancy larger than 1";
                } else {
                    r = Resolution::fallback;
                    why = "adjacent discrepancies";
                }
            }
            out.counts[i] = r == Resolution::primary ? ra[i] : rb[i];
            res.diffs.push_back({arm_a.arm_label, i, ra[i], rb[i], out.counts[i], r, why});
        }
        res.table.arms.push_back(std::move(out));
    }
    res.report.merge(validate_risk_table(res.table));
    return res;
}

// ---------------------------------------------------------------------------
// Export gate
// ---------------------------------------------------------------------------
struct ExportFragment {
    std::string xy_rows;    // rows for xy.csv, no header
    std::string risk_rows;  // rows for risk_table.csv, no header
};

inline ValidationReport check_terminal_month(const KMCurve& curve, const RiskTable& rt) {
    ValidationReport rep;
    const auto& g = rt.time_grid;
    if (g.size() >= 2) {
        double step = g.back() - g[g.size() - 2];
        if (curve.end_time() < g.back() - step) {
            rep.error(rule::terminal_month, curve.study.rendered() + " / " + curve.arm_label,
                      "terminal month mismatch: curve ends at " + csv::format_number(curve.end_time()) +
                          " but risk grid runs to " + csv::format_number(g.back()));
        }
    }
    return rep;
}

inline std::string xy_rows(const KMCurve& curve) {
    std::string out;
    const auto sid = csv::quote(curve.study.rendered());
    const auto arm = csv::quote(curve.arm_label);
    for (const auto& p : curve.points)
        out += sid + "," + arm + "," + csv::format_number(p.time) + "," + csv::format_percent(p.survival) + "\n";
    return out;
}

inline std::string risk_rows(const StudyId& study, const std::string& arm_label,
                             const std::vector<double>& grid, const std::vector<long>& counts) {
    std::string out;
    const auto sid = csv::quote(study.rendered());
    const auto arm = csv::quote(arm_label);
    for (std::size_t i = 0; i < grid.size() && i < counts.size(); ++i)
        out += sid + "," + arm + "," + csv::format_number(grid[i]) + "," + std::to_string(counts[i]) + "\n";
    return out;
}

// Risk-table rows are keyed by the curve's verbatim arm label so that the two
// files align one-to-one by study-arm key.
inline ExportFragment finalize_arm(const KMCurve& curve, const ArmMapping& mapping, const RiskTable& rt) {
    ValidationReport rep = validate_curve(curve);
    rep.merge(validate_risk_table(rt));

    const std::string where = curve.study.rendered() + " / " + curve.arm_label;
    const ArmPair* pair = mapping.for_curve(curve.arm_label);
    const RiskArm* arm = pair ? rt.find_arm(pair->table_label) : nullptr;
    if (!arm) rep.error(rule::unmatched_arm, where, "unmatched arm: no risk-table arm mapped to this curve");
    if (curve.study.rendered() != rt.study.rendered())
        rep.error(rule::unmatched_arm, where, "curve and risk table belong to different studies");
    rep.merge(check_terminal_month(curve, rt));

    if (rep.has_errors()) throw ExportBlocked(std::move(rep));
    return {xy_rows(curve), risk_rows(curve.study, curve.arm_label, rt.time_grid, arm->counts)};
}

}  // namespace kmlead
