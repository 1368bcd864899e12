#pragma once

// Design-stage summaries of predictive ensembles: pointwise OS with credible
// bands, median OS, paired class comparison, and fan-plot data.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kmlead/core.hpp"
#include "kmlead/csv.hpp"
#include "kmlead/synthesis.hpp"

namespace kmlead {

struct SurvivalSummary {
    std::vector<double> times;
    std::vector<double> estimate;  // ensemble mean
    std::vector<double> lower;     // 2.5% percentile
    std::vector<double> upper;     // 97.5% percentile
};

struct Interval {
    double estimate = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

// Type-7 (linear) sample quantile; `xs` is sorted in place.
inline double quantile(std::vector<double>& xs, double p) {
    if (xs.empty()) throw InputError("quantile: empty sample");
    std::sort(xs.begin(), xs.end());
    const double h = (static_cast<double>(xs.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline Interval summarize_values(std::vector<double> xs) {
    if (xs.empty()) throw InputError("summarize_values: empty sample");
    Interval iv;
    iv.estimate = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    iv.lower = quantile(xs, 0.025);
    iv.upper = quantile(xs, 0.975);
    return iv;
}

// Survival of one draw at time t, linear between grid points and (0, 1).
inline double curve_at(const TimeGrid& grid, const std::vector<double>& curve, double t) {
    if (t < 0.0) throw InputError("curve_at: negative time");
    if (t > grid.last() * (1.0 + 1e-12)) throw InputError("time " + csv::format_number(t) + " is beyond t_K = " + csv::format_number(grid.last()));
    double t0 = 0.0, s0 = 1.0;
    for (std::size_t k = 0; k < grid.K(); ++k) {
        const double t1 = grid.times[k], s1 = curve[k];
        if (t <= t1) return t1 == t0 ? s1 : s0 + (s1 - s0) * (t - t0) / (t1 - t0);
        t0 = t1;
        s0 = s1;
    }
    return curve.back();
}

inline SurvivalSummary summarize(const PredictiveEnsemble& ens, const std::vector<double>& times) {
    if (ens.M() == 0) throw InputError("summarize: empty ensemble");
    SurvivalSummary out;
    out.times = times;
    for (double t : times) {
        std::vector<double> vals;
        vals.reserve(ens.M());
        for (const auto& c : ens.curves) vals.push_back(curve_at(ens.grid, c, t));
        auto iv = summarize_values(std::move(vals));
        out.estimate.push_back(iv.estimate);
        out.lower.push_back(iv.lower);
        out.upper.push_back(iv.upper);
    }
    return out;
}

// First crossing of 0.5, linearly interpolated; nullopt when never reached.
inline std::optional<double> median_os(const TimeGrid& grid, const std::vector<double>& curve) {
    double t0 = 0.0, s0 = 1.0;
    for (std::size_t k = 0; k < grid.K(); ++k) {
        const double t1 = grid.times[k], s1 = curve[k];
        if (s1 == 0.5) return t1;
        if (s1 < 0.5) return t0 + (t1 - t0) * (s0 - 0.5) / (s0 - s1);
        t0 = t1;
        s0 = s1;
    }
    return std::nullopt;
}

struct ArmComparison {
    double margin = 3.0;
    SurvivalSummary delta_os;  // b - a
    Interval median_a;
    Interval median_b;
    Interval delta_median;
    double prob_benefit = 0.0;  // P(median_b - median_a >= margin)
    std::size_t pairs = 0;
    std::size_t excluded_pairs = 0;  // at least one median not reached
    std::size_t not_reached_a = 0;
    std::size_t not_reached_b = 0;
};

inline constexpr double kMedianTolerance = 1e-9;  // months

// Pairs draw i of `a` with draw i of `b` (or with a seeded permutation of `b`).
inline ArmComparison compare(const PredictiveEnsemble& a, const PredictiveEnsemble& b, double margin,
                             const std::vector<double>& times, std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
    if (a.grid.times != b.grid.times) throw InputError("compare: ensembles are on different grids");
    if (a.M() != b.M()) throw InputError("compare: ensembles have different draw counts");
    if (a.M() == 0) throw InputError("compare: empty ensembles");
    const std::size_t M = a.M();
    std::vector<std::size_t> pair_of(M);
    std::iota(pair_of.begin(), pair_of.end(), 0);
    if (shuffle_seed) {
        auto rng = make_stream(*shuffle_seed, 0x5F);
        std::shuffle(pair_of.begin(), pair_of.end(), rng);
    }

    ArmComparison out;
    out.margin = margin;
    out.pairs = M;
    out.delta_os.times = times;
    for (double t : times) {
        std::vector<double> diffs;
        diffs.reserve(M);
        for (std::size_t i = 0; i < M; ++i)
            diffs.push_back(curve_at(b.grid, b.curves[pair_of[i]], t) - curve_at(a.grid, a.curves[i], t));
        auto iv = summarize_values(std::move(diffs));
        out.delta_os.estimate.push_back(iv.estimate);
        out.delta_os.lower.push_back(iv.lower);
        out.delta_os.upper.push_back(iv.upper);
    }

    std::vector<double> med_a, med_b, delta;
    std::size_t benefit = 0;
    for (std::size_t i = 0; i < M; ++i) {
        auto ma = median_os(a.grid, a.curves[i]);
        auto mb = median_os(b.grid, b.curves[pair_of[i]]);
        if (ma) med_a.push_back(*ma);
        else ++out.not_reached_a;
        if (mb) med_b.push_back(*mb);
        else ++out.not_reached_b;
        if (!ma || !mb) {
            ++out.excluded_pairs;
            continue;
        }
        double d = *mb - *ma;
        delta.push_back(d);
        if (d >= margin - kMedianTolerance) ++benefit;
    }
    if (!med_a.empty()) out.median_a = summarize_values(med_a);
    if (!med_b.empty()) out.median_b = summarize_values(med_b);
    if (!delta.empty()) out.delta_median = summarize_values(delta);
    out.prob_benefit = static_cast<double>(benefit) / static_cast<double>(M);
    return out;
}

// Rows: source,draw_id,t,survival. At most `max_draws` evenly thinned draws
// (K rows each, source = `label`), then every overlay curve's 500 points.
inline std::string fan_plot_rows(const PredictiveEnsemble& ens, const std::vector<KMCurve>& overlays = {},
                                 std::size_t max_draws = 200, const std::string& label = "predictive") {
    std::string out;
    const std::string draw_src = csv::quote(label);
    const std::size_t M = ens.M();
    const std::size_t shown = std::min(M, max_draws);
    for (std::size_t j = 0; j < shown; ++j) {
        const std::size_t i = j * M / shown;
        for (std::size_t k = 0; k < ens.grid.K(); ++k)
            out += draw_src + "," + std::to_string(i) + "," + csv::format_number(ens.grid.times[k]) + "," +
                   csv::format_number(ens.curves[i][k]) + "\n";
    }
    for (std::size_t o = 0; o < overlays.size(); ++o) {
        const auto& c = overlays[o];
        const std::string src = csv::quote(c.study.rendered() + " / " + c.arm_label);
        for (const auto& p : c.points)
            out += src + "," + std::to_string(o) + "," + csv::format_number(p.time) + "," + csv::format_number(p.survival) + "\n";
    }
    return out;
}

inline std::string fan_plot_data(const PredictiveEnsemble& ens, const std::vector<KMCurve>& overlays = {},
                                 std::size_t max_draws = 200, const std::string& label = "predictive") {
    return std::string(kSchemaTag) + "\n" + csv::header_line({"source", "draw_id", "t", "survival"}) +
           fan_plot_rows(ens, overlays, max_draws, label);
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

// "2.8 (-2.0, 7.6)"
inline std::string format_interval(const Interval& iv, int decimals = 1) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.*f (%.*f, %.*f)", decimals, iv.estimate, decimals, iv.lower, decimals, iv.upper);
    return buf;
}

struct NamedSummary {
    std::string label;
    SurvivalSummary summary;
};

inline std::string format_os_table(const std::vector<NamedSummary>& rows) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line({"class", "time_months", "estimate", "ci_2.5", "ci_97.5"});
    for (const auto& r : rows)
        for (std::size_t i = 0; i < r.summary.times.size(); ++i)
            out += csv::quote(r.label) + "," + csv::format_number(r.summary.times[i]) + "," +
                   csv::format_number(r.summary.estimate[i]) + "," + csv::format_number(r.summary.lower[i]) + "," +
                   csv::format_number(r.summary.upper[i]) + "\n";
    return out;
}

inline std::string format_medians(const std::string& label_a, const std::string& label_b, const ArmComparison& cmp) {
    std::string out = std::string(kSchemaTag) + "\n" +
                      csv::header_line({"class", "median_estimate", "ci_2.5", "ci_97.5", "not_reached"});
    auto row = [&](const std::string& label, const Interval& iv, std::size_t nr) {
        out += csv::quote(label) + "," + csv::format_number(iv.estimate) + "," + csv::format_number(iv.lower) + "," +
               csv::format_number(iv.upper) + "," + std::to_string(nr) + "\n";
    };
    row(label_a, cmp.median_a, cmp.not_reached_a);
    row(label_b, cmp.median_b, cmp.not_reached_b);
    return out;
}

inline nlohmann::json comparison_to_json(const std::string& label_a, const std::string& label_b, const ArmComparison& c) {
    auto iv = [](const Interval& i) { return nlohmann::json{{"estimate", i.estimate}, {"lower", i.lower}, {"upper", i.upper}}; };
    nlohmann::json j;
    j["schema"] = "km-lead v1";
    j["reference"] = label_a;
    j["experimental"] = label_b;
    j["margin_months"] = c.margin;
    j["median_reference"] = iv(c.median_a);
    j["median_experimental"] = iv(c.median_b);
    j["delta_median"] = iv(c.delta_median);
    j["delta_median_text"] = format_interval(c.delta_median);
    j["prob_benefit"] = c.prob_benefit;
    j["pairs"] = c.pairs;
    j["excluded_pairs"] = c.excluded_pairs;
    j["delta_os"] = {{"times", c.delta_os.times},
                     {"estimate", c.delta_os.estimate},
                     {"lower", c.delta_os.lower},
                     {"upper", c.delta_os.upper}};
    return j;
}

}  // namespace kmlead
