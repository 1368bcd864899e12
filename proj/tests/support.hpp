#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kmlead/core.hpp"
#include "kmlead/digitizer.hpp"
#include "kmlead/reconstructor.hpp"

namespace testsupport {

using namespace kmlead;

inline CovariateSummary prop(const std::string& name, double p) { return {name, Proportion{p}}; }

inline BaselineProfile table1_profile(const std::string& study, const std::string& arm, long n, double med, double lo,
                                      double hi, double female, double ecog0, double squamous, double never,
                                      double pdl1) {
    return {StudyId{study, std::nullopt},
            arm,
            n,
            {{"age", MedianRange{med, lo, hi}},
             prop("female", female),
             prop("ecog0", ecog0),
             prop("squamous", squamous),
             prop("never_smoker", never),
             prop("pdl1_ge1", pdl1)}};
}

// Baseline characteristics of the five first-line NSCLC trials (CheckMate-227
// contributes its dual-therapy arm; POSEIDON both arms).
inline std::vector<BaselineProfile> table1() {
    return {
        table1_profile("CheckMate-9LA", "NIVO+IPI+CT", 361, 65, 59, 70, .30, .31, .31, .13, .60),
        table1_profile("CheckMate-227", "NIVO+IPI", 583, 64, 26, 87, .326, .35, .28, .136, .679),
        table1_profile("POSEIDON", "T+D+CT", 338, 63, 27, 87, .204, .325, .367, .175, .63),
        table1_profile("POSEIDON", "D+CT", 338, 64.5, 32, 87, .251, .322, .379, .249, .663),
        table1_profile("KEYNOTE-189", "Pembro+CT", 410, 65, 34, 84, .38, .454, 0, .117, .634),
        table1_profile("KEYNOTE-407", "Pembro+CT", 278, 65, 29, 87, .209, .263, .975, .079, .633),
    };
}

inline const std::vector<std::string>& table1_covariates() {
    static const std::vector<std::string> c{"age", "female", "ecog0", "squamous", "never_smoker", "pdl1_ge1"};
    return c;
}

// ---------------------------------------------------------------------------
// Simulated arms for IPD round-trip
// ---------------------------------------------------------------------------

struct SimArm {
    ReconstructedIPD truth;
    KMCurve curve;                 // standardized 500-point trace of the exact KM
    std::vector<double> grid;      // risk-table times, starting at 0
    std::vector<long> counts;      // exact numbers at risk
    double censor_fraction = 0.0;  // realized
};

struct SimSettings {
    double median = 12.0;    // months
    double followup = 72.0;  // administrative cut-off
    double step = 6.0;       // risk-table spacing
};

inline double weibull_rate(double shape, double median) { return std::log(2.0) / std::pow(median, shape); }

// Exponential censoring rate giving (approximately) the requested total
// censored fraction, administrative censoring included.
inline double censor_rate_for(double target, double shape, const SimSettings& s) {
    const double lam = weibull_rate(shape, s.median);
    std::mt19937_64 rng(12345);
    std::vector<double> t(20000), e(20000);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = std::pow(-std::log(1.0 - U(rng)) / lam, 1.0 / shape);
        e[i] = -std::log(1.0 - U(rng));
    }
    auto frac = [&](double rate) {
        std::size_t c = 0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            double cens = rate > 0 ? e[i] / rate : INFINITY;
            if (std::min(cens, s.followup) < t[i]) ++c;
        }
        return static_cast<double>(c) / static_cast<double>(t.size());
    };
    double lo = 0.0, hi = 10.0;
    if (frac(lo) >= target) return 0.0;
    for (int it = 0; it < 60; ++it) {
        double mid = 0.5 * (lo + hi);
        (frac(mid) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// Exact KM drawn as near-vertical steps, then standardized to 500 points.
inline KMCurve curve_from_km(const KMEstimate& km, double t_end, const StudyId& study, const std::string& arm) {
    const double eps = 1e-7;
    std::vector<DataPoint> pts{{0.0, 100.0}};
    double prev = 1.0;
    for (std::size_t i = 0; i < km.times.size(); ++i) {
        const double t = km.times[i];
        if (t - eps > pts.back().time) pts.push_back({t - eps, prev * 100.0});
        pts.push_back({t, km.survival[i] * 100.0});
        prev = km.survival[i];
    }
    if (t_end > pts.back().time) pts.push_back({t_end, prev * 100.0});
    auto sc = standardize_curve(pts, study, arm);
    return sc.curve;
}

inline SimArm simulate_arm(long n, double censor_target, double shape, std::uint64_t seed, const SimSettings& s = {}) {
    const double lam = weibull_rate(shape, s.median);
    const double crate = censor_rate_for(censor_target, shape, s);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    SimArm arm;
    arm.truth.study = StudyId{"SIM", std::nullopt};
    arm.truth.arm_label = "arm";
    long censored = 0;
    for (long i = 0; i < n; ++i) {
        double t = std::pow(-std::log(1.0 - U(rng)) / lam, 1.0 / shape);
        double c = crate > 0 ? -std::log(1.0 - U(rng)) / crate : INFINITY;
        double y = std::min({t, c, s.followup});
        int ev = t <= std::min(c, s.followup) ? 1 : 0;
        censored += 1 - ev;
        arm.truth.records.push_back({y, ev});
    }
    arm.censor_fraction = static_cast<double>(censored) / static_cast<double>(n);
    double t_end = 0.0;
    for (const auto& r : arm.truth.records) t_end = std::max(t_end, r.time);
    arm.curve = curve_from_km(km_estimator(arm.truth), t_end, arm.truth.study, arm.truth.arm_label);
    for (double g = 0.0; g <= std::min(s.followup, t_end) + 1e-9; g += s.step) {
        arm.grid.push_back(g);
        arm.counts.push_back(number_at_risk(arm.truth, g));
    }
    return arm;
}

// Event table for n patients with Weibull(lambda, kappa) survival and
// administrative censoring at the last grid time.
inline EventTable simulate_event_table(double lambda, double kappa, long n, const TimeGrid& grid, std::uint64_t seed,
                                       const std::string& study = "SIM") {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    ReconstructedIPD ipd{StudyId{study, std::nullopt}, "arm", {}};
    for (long i = 0; i < n; ++i) {
        double t = std::pow(-std::log(1.0 - U(rng)) / lambda, 1.0 / kappa);
        ipd.records.push_back({t, 1});
    }
    return tabulate_events(discretize(ipd, grid), grid);
}

inline TimeGrid even_grid(double step, double last) {
    TimeGrid g;
    for (double t = step; t <= last + 1e-9; t += step) g.times.push_back(t);
    return g;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("kmlead_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testsupport
