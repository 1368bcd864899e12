#pragma once

// IPD reconstruction from a standardized KM curve and its risk-table row,
// plus the product-limit estimator, shared-grid selection, discretization and
// event tabulation used by the hierarchical model.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kmlead/core.hpp"
#include "kmlead/csv.hpp"

namespace kmlead {

struct ReconstructionError : Error {
    using Error::Error;
};

struct TimeGrid {
    std::vector<double> times;  // t_1 .. t_K, t_1 > 0

    std::size_t K() const { return times.size(); }
    double last() const { return times.empty() ? 0.0 : times.back(); }
    friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

struct EventTable {
    StudyId study;
    std::string arm_label;
    std::vector<long> d;  // events at t_k
    std::vector<long> r;  // at risk at t_k

    std::size_t K() const { return d.size(); }
    long m(std::size_t k) const { return r[k] - d[k]; }
    long n() const { return r.empty() ? 0 : r.front(); }
    friend bool operator==(const EventTable&, const EventTable&) = default;
};

// Right-continuous step function starting at 1.
struct KMEstimate {
    std::vector<double> times;     // distinct event times
    std::vector<double> survival;  // S just after each event time
    std::vector<long> at_risk;     // number at risk at each event time

    double at(double t) const {
        auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return 1.0;
        return survival[static_cast<std::size_t>(it - times.begin()) - 1];
    }
};

// Product-limit estimate. Records censored exactly at an event time are at
// risk for that event.
inline KMEstimate km_estimator(const ReconstructedIPD& ipd) {
    std::vector<IpdRecord> recs = ipd.records;
    std::sort(recs.begin(), recs.end(), [](const IpdRecord& a, const IpdRecord& b) {
        return a.time < b.time || (a.time == b.time && a.event > b.event);
    });
    KMEstimate km;
    long n_risk = static_cast<long>(recs.size());
    double s = 1.0;
    std::size_t i = 0;
    while (i < recs.size()) {
        double t = recs[i].time;
        long d = 0, leaving = 0;
        while (i < recs.size() && recs[i].time == t) {
            d += recs[i].event;
            ++leaving;
            ++i;
        }
        if (d > 0) {
            s *= 1.0 - static_cast<double>(d) / static_cast<double>(n_risk);
            km.times.push_back(t);
            km.survival.push_back(s);
            km.at_risk.push_back(n_risk);
        }
        n_risk -= leaving;
    }
    return km;
}

inline long number_at_risk(const ReconstructedIPD& ipd, double t) {
    return static_cast<long>(std::count_if(ipd.records.begin(), ipd.records.end(),
                                           [t](const IpdRecord& r) { return r.time >= t; }));
}

namespace detail {

struct EventAt {
    double time;
    long count;
};

inline long total(const std::vector<EventAt>& ev) {
    long s = 0;
    for (const auto& e : ev) s += e.count;
    return s;
}

inline std::vector<double> spread_censorings(long c, double lo, double hi) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(std::max(0L, c)));
    for (long k = 0; k < c; ++k)
        out.push_back(lo + (static_cast<double>(k) + 0.5) * (hi - lo) / static_cast<double>(c));
    return out;
}

struct IntervalPlan {
    std::vector<EventAt> events;
    std::vector<double> censor_times;  // sorted
    long used = 0;         // censorings placed before drops
    double max_err = 0.0;  // worst drop mismatch on the survival scale
};

struct DropChoice {
    long k = 0;  // censorings placed just before the drop
    long d = 0;  // events at the drop
    double err = std::numeric_limits<double>::infinity();
};

inline double rounded_gap(double a, double b) { return std::round(std::abs(a - b) * 1e9) / 1e9; }

// Best (censorings, events) pair for one drop from `s_hat` to `target` with
// `n_risk` at risk and up to `k_max` censorings available.
inline DropChoice best_drop(long n_risk, double s_hat, double target, long k_max) {
    DropChoice best;
    for (long k = 0; k <= k_max; ++k) {
        const long n = n_risk - k;
        if (n <= 0) break;
        const double raw = static_cast<double>(n) * (1.0 - target / s_hat);
        for (long d : {static_cast<long>(std::floor(raw)), static_cast<long>(std::ceil(raw))}) {
            d = std::clamp(d, 0L, n);
            const double err = rounded_gap(s_hat * (1.0 - static_cast<double>(d) / static_cast<double>(n)), target);
            if (err < best.err) best = {k, d, err};
        }
    }
    return best;
}

// Events and censorings inside one interval, chosen jointly by dynamic
// programming. Once the events and censorings so far are fixed, the number
// still at risk (between `n_floor` and `n_start`) determines how many can
// leave later, so it is the state. Paths minimise the worst drop mismatch,
// then the summed mismatch; censorings before a drop sit between it and the
// previous drop.
//
// `straddle` is the index of the first curve point at or past hi_t when the
// segment before it crosses hi_t: part of its drop may be events before hi_t.
// The part left over is scored by the best drop the next interval (`n_next`
// at risk, `next_budget` leavers) could make.
inline IntervalPlan plan_interval(const std::vector<CurvePoint>& pts, std::size_t lo_idx, std::size_t hi_idx,
                                  double lo_t, double hi_t, long n_start, double s_start, long n_floor,
                                  std::optional<std::size_t> straddle = std::nullopt, long n_next = 0,
                                  long next_budget = 0) {
    struct Cell {
        bool ok = false;
        double max_err = 0.0, sum_err = 0.0, s = 0.0;
        long parent = 0, k = 0, d = 0;
    };
    auto better = [](double m1, double s1, const Cell& c) {
        return !c.ok || m1 < c.max_err || (m1 == c.max_err && s1 < c.sum_err - 1e-12);
    };
    const auto width = static_cast<std::size_t>(n_start - n_floor + 1);
    auto slot = [&](long n) { return static_cast<std::size_t>(n - n_floor); };

    std::vector<double> layer_time;
    std::vector<std::vector<Cell>> layers;
    std::vector<Cell> cur(width);
    cur[slot(n_start)] = {true, 0.0, 0.0, s_start, n_start, 0, 0};
    double prev_t = lo_t;
    for (std::size_t i = lo_idx; i < hi_idx; ++i) {
        const double prev_s = i > 0 ? pts[i - 1].survival : 1.0;
        const double target = pts[i].survival;
        if (!(target < prev_s)) continue;
        const double t = pts[i].time;
        const bool room = t > prev_t;
        std::vector<Cell> next(width);
        for (long n = n_start; n >= n_floor; --n) {
            const Cell& c = cur[slot(n)];
            if (!c.ok) continue;
            const long k_max = room ? n - n_floor : 0;
            for (long k = 0; k <= k_max; ++k) {
                const long nk = n - k;
                if (nk <= 0 || c.s <= 0.0 || target >= c.s) {
                    const double err = rounded_gap(c.s, target);
                    Cell& dst = next[slot(nk)];
                    const double m = std::max(c.max_err, err), sum = c.sum_err + err;
                    if (better(m, sum, dst)) dst = {true, m, sum, c.s, n, k, 0};
                    continue;
                }
                const double raw = static_cast<double>(nk) * (1.0 - target / c.s);
                const long d_lo = std::clamp(static_cast<long>(std::floor(raw)), 0L, nk - n_floor);
                const long d_hi = std::clamp(static_cast<long>(std::ceil(raw)), 0L, nk - n_floor);
                for (long d = d_lo; d <= d_hi; ++d) {
                    const double s = c.s * (1.0 - static_cast<double>(d) / static_cast<double>(nk));
                    const double err = rounded_gap(s, target);
                    const double m = std::max(c.max_err, err), sum = c.sum_err + err;
                    Cell& dst = next[slot(nk - d)];
                    if (better(m, sum, dst)) dst = {true, m, sum, s, n, k, d};
                }
            }
        }
        layers.push_back(next);
        layer_time.push_back(t);
        cur = std::move(next);
        prev_t = t;
    }

    // final state, with the straddling drop split if that fits better
    const double inside_from = hi_idx > 0 ? std::max(prev_t, pts[hi_idx - 1].time) : prev_t;
    const double t_in = 0.5 * (inside_from + hi_t);
    const bool use_straddle = straddle && t_in > inside_from && t_in < hi_t;
    auto residual = [&](double s_from) {
        const double target = pts[*straddle].survival;
        if (s_from <= target || n_next <= 0) return rounded_gap(s_from, target);
        return best_drop(n_next, s_from, target, std::min(next_budget, n_next)).err;
    };
    long end_n = -1, take_k = 0, take_d = 0;
    double end_m = 0.0, end_sum = 0.0;
    for (long n = n_start; n >= n_floor; --n) {
        const Cell& c = cur[slot(n)];
        if (!c.ok) continue;
        auto consider = [&](double err, long k, long d) {
            const double m = std::max(c.max_err, err), sum = c.sum_err + err;
            if (end_n < 0 || m < end_m || (m == end_m && sum < end_sum - 1e-12)) {
                end_n = n;
                end_m = m;
                end_sum = sum;
                take_k = k;
                take_d = d;
            }
        };
        if (!use_straddle) {
            consider(0.0, 0, 0);
            continue;
        }
        consider(residual(c.s), 0, 0);
        const double target = pts[*straddle].survival;
        if (c.s <= target) continue;
        for (long k = 0; k <= n - n_floor; ++k) {
            const long nk = n - k;
            if (nk <= 0) break;
            const long d_max = std::min(nk - n_floor, static_cast<long>(std::ceil(static_cast<double>(nk) * (1.0 - target / c.s))) + 1);
            for (long d = 1; d <= d_max; ++d)
                consider(residual(c.s * (1.0 - static_cast<double>(d) / static_cast<double>(nk))), k, d);
        }
    }

    IntervalPlan plan;
    plan.max_err = end_m;
    long n = end_n;
    if (take_d > 0 || take_k > 0) {
        plan.censor_times = spread_censorings(take_k, inside_from, t_in);
        if (take_d > 0) plan.events.push_back({t_in, take_d});
        plan.used += take_k;
    }
    for (std::size_t L = layers.size(); L-- > 0;) {
        const Cell& c = layers[L][slot(n)];
        const double from = L > 0 ? layer_time[L - 1] : lo_t;
        for (double ct : spread_censorings(c.k, from, layer_time[L])) plan.censor_times.push_back(ct);
        if (c.d > 0) plan.events.push_back({layer_time[L], c.d});
        plan.used += c.k;
        n = c.parent;
    }
    std::reverse(plan.events.begin(), plan.events.end());
    std::sort(plan.censor_times.begin(), plan.censor_times.end());
    return plan;
}

}  // namespace detail

// Interval-wise inversion. Within each risk-table interval [T_j, T_{j+1}) event
// counts come from the curve's drops via the product-limit relation, with the
// n_j - n_{j+1} leavers split between events and censorings so that the
// reconstructed curve tracks the digitized one as closely as integer counts
// allow. After the last risk-table time remaining drops become events and
// survivors are censored at the curve end.
inline ReconstructedIPD reconstruct_ipd(const KMCurve& curve, const std::vector<double>& grid,
                                        const std::vector<long>& counts) {
    if (grid.size() != counts.size() || grid.empty())
        throw InputError("reconstruct_ipd: time grid and counts must be nonempty and equal length");
    if (grid.front() != 0.0) throw InputError("reconstruct_ipd: risk grid must start at 0");
    if (counts.front() <= 0) throw InputError("reconstruct_ipd: counts[0] must be positive");
    for (std::size_t j = 1; j < grid.size(); ++j) {
        if (!(grid[j] > grid[j - 1])) throw InputError("reconstruct_ipd: risk grid not increasing");
        if (counts[j] > counts[j - 1] || counts[j] < 0)
            throw InputError("reconstruct_ipd: at-risk counts must be non-increasing and nonnegative");
    }
    auto crep = validate_curve(curve);
    if (crep.has_errors()) throw InputError("reconstruct_ipd: invalid curve\n" + crep.to_text());

    const auto& pts = curve.points;
    const double t_end = curve.end_time();
    const std::size_t m = grid.size() - 1;

    ReconstructedIPD out{curve.study, curve.arm_label, {}};
    out.records.reserve(static_cast<std::size_t>(counts.front()));

    // first curve index with time >= t
    auto index_of = [&](double t) {
        return static_cast<std::size_t>(
            std::lower_bound(pts.begin(), pts.end(), t,
                             [](const CurvePoint& p, double x) { return p.time < x; }) -
            pts.begin());
    };

    double s_hat = 1.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double lo_t = grid[j], hi_t = grid[j + 1];
        const long n_j = counts[j];
        const long budget = n_j - counts[j + 1];
        std::size_t lo = index_of(lo_t);
        std::size_t hi = index_of(hi_t);
        if (lo > hi) lo = hi;
        std::optional<std::size_t> straddle;
        if (hi < pts.size() && hi >= 1 && pts[hi - 1].time < hi_t && hi >= lo) straddle = hi;

        // For any right-censored sample S(T_{j+1}-) / S(T_j-) >= n_{j+1} / n_j.
        // The curve is measured from its first point inside the interval so a
        // drop straddling T_j cannot trigger a false alarm.
        if (hi > lo && n_j > 0 && pts[lo].survival > 0.0) {
            double expected = static_cast<double>(n_j) * (1.0 - pts[hi - 1].survival / pts[lo].survival);
            if (expected > static_cast<double>(budget) + 1.5) {
                throw ReconstructionError(
                    "infeasible interval [" + csv::format_number(lo_t) + ", " + csv::format_number(hi_t) +
                    "): curve drop needs about " + csv::format_number(std::round(expected)) +
                    " events but only " + std::to_string(budget) + " patients leave the risk set");
            }
        }

        auto plan = detail::plan_interval(pts, lo, hi, lo_t, hi_t, n_j, s_hat, counts[j + 1], straddle, counts[j + 1],
                                          j + 2 < counts.size() ? counts[j + 1] - counts[j + 2] : counts[j + 1]);
        auto& events = plan.events;
        auto& censor_t = plan.censor_times;
        const long d_total = detail::total(events);
        // remaining leavers are censored after the last event of the interval
        const long leftover = budget - d_total - static_cast<long>(censor_t.size());
        double tail_from = events.empty() ? lo_t : events.back().time;
        if (!censor_t.empty()) tail_from = std::max(tail_from, censor_t.back());
        for (double t : detail::spread_censorings(leftover, tail_from, hi_t)) censor_t.push_back(t);
        std::sort(censor_t.begin(), censor_t.end());

        // replay the interval on the actual records to carry the exact KM forward
        long n_risk = n_j;
        std::size_t ci = 0;
        for (const auto& e : events) {
            while (ci < censor_t.size() && censor_t[ci] < e.time) {
                --n_risk;
                ++ci;
            }
            s_hat *= 1.0 - static_cast<double>(e.count) / static_cast<double>(n_risk);
            n_risk -= e.count;
            for (long k = 0; k < e.count; ++k) out.records.push_back({e.time, 1});
        }
        for (double t : censor_t) out.records.push_back({t, 0});
    }

    // Tail after the last risk-table time: any survivor may be censored before
    // a drop; whoever is left is censored at the curve end.
    {
        const long n_m = counts[m];
        const double lo_t = grid[m];
        const double censor_at = std::max(t_end, lo_t);
        std::size_t lo = index_of(lo_t);
        auto plan = detail::plan_interval(pts, lo, pts.size(), lo_t, censor_at, n_m, s_hat, 0);
        const long d_total = detail::total(plan.events);
        for (const auto& e : plan.events)
            for (long k = 0; k < e.count; ++k) out.records.push_back({e.time, 1});
        for (double t : plan.censor_times) out.records.push_back({t, 0});
        for (long k = d_total + plan.used; k < n_m; ++k) out.records.push_back({censor_at, 0});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shared grid
// ---------------------------------------------------------------------------
inline double grid_spacing(const std::vector<double>& g) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < g.size(); ++i) best = std::min(best, g[i] - g[i - 1]);
    return best;
}

// Picks the finest risk-table grid; t_K is the longest follow-up across the
// tables (or `max_followup` if larger). A finer grid that ends early is
// extended at its own spacing.
inline TimeGrid choose_grid(const std::vector<RiskTable>& tables, double max_followup = 0.0) {
    if (tables.empty()) throw InputError("choose_grid: no risk tables");
    const RiskTable* finest = nullptr;
    double finest_step = std::numeric_limits<double>::infinity();
    double t_k = max_followup;
    for (const auto& t : tables) {
        if (t.time_grid.size() < 2) throw InputError("choose_grid: risk table grid has fewer than 2 times");
        double step = grid_spacing(t.time_grid);
        if (step < finest_step) {
            finest_step = step;
            finest = &t;
        }
        t_k = std::max(t_k, t.time_grid.back());
    }
    TimeGrid g;
    for (double t : finest->time_grid)
        if (t > 0.0) g.times.push_back(t);
    const double step = finest->time_grid.back() - finest->time_grid[finest->time_grid.size() - 2];
    while (g.times.back() + step < t_k - 1e-9 * t_k) g.times.push_back(g.times.back() + step);
    if (g.times.back() < t_k) g.times.push_back(t_k);
    return g;
}

// Rounds each time up to the smallest grid time >= Y; times beyond t_K become
// censorings at t_K.
inline ReconstructedIPD discretize(const ReconstructedIPD& ipd, const TimeGrid& grid) {
    if (grid.times.empty()) throw InputError("discretize: empty grid");
    ReconstructedIPD out{ipd.study, ipd.arm_label, {}};
    out.records.reserve(ipd.records.size());
    for (const auto& r : ipd.records) {
        const double slack = 1e-9 * std::max(1.0, std::abs(r.time));
        auto it = std::lower_bound(grid.times.begin(), grid.times.end(), r.time - slack);
        if (it == grid.times.end()) out.records.push_back({grid.last(), 0});
        else out.records.push_back({*it, r.event});
    }
    return out;
}

// r_k = #{Y_i >= t_k}; d_k = #{Y_i = t_k, event}.
inline EventTable tabulate_events(const ReconstructedIPD& ipd, const TimeGrid& grid) {
    EventTable et{ipd.study, ipd.arm_label, std::vector<long>(grid.K(), 0), std::vector<long>(grid.K(), 0)};
    std::vector<long> leaving(grid.K(), 0);
    for (const auto& r : ipd.records) {
        auto it = std::lower_bound(grid.times.begin(), grid.times.end(), r.time);
        if (it == grid.times.end() || *it != r.time)
            throw Error("tabulate_events: time " + csv::format_number(r.time) + " is not on the grid");
        auto k = static_cast<std::size_t>(it - grid.times.begin());
        ++leaving[k];
        if (r.event) ++et.d[k];
    }
    long remaining = static_cast<long>(ipd.records.size());
    for (std::size_t k = 0; k < grid.K(); ++k) {
        et.r[k] = remaining;
        remaining -= leaving[k];
    }
    return et;
}

}  // namespace kmlead
