// Writes the synthetic demo bundle used by README examples and the CLI tests:
// xy.csv, risk_table.csv, baseline.csv and demo.json. The six arms mimic the
// first-line NSCLC trials (published baseline summaries, Weibull survival with
// roughly the published median OS); the curves are simulated, not digitized.
//
//   make_demo <output-dir>

#include <cmath>
#include <iostream>
#include <random>

#include "kmlead/io.hpp"
#include "kmlead/reconstructor.hpp"

namespace {

using namespace kmlead;

struct DemoArm {
    std::string study;
    std::string arm;
    long n;
    double median_os;  // months
    double shape;
    double followup;   // months from first enrolment to data cut
    std::uint64_t seed;
};

struct Baseline {
    double age_median, age_min, age_max, female, ecog0, squamous, never_smoker, pdl1_ge1;
};

const std::vector<std::pair<DemoArm, Baseline>>& demo_arms() {
    static const std::vector<std::pair<DemoArm, Baseline>> arms{
        {{"CheckMate-9LA", "NIVO+IPI+CT", 361, 15.8, 1.05, 54, 11}, {65, 59, 70, .30, .31, .31, .13, .60}},
        {{"CheckMate-227", "NIVO+IPI", 583, 17.1, 1.0, 72, 12}, {64, 26, 87, .326, .35, .28, .136, .679}},
        {{"POSEIDON", "T+D+CT", 338, 14.0, 1.1, 60, 13}, {63, 27, 87, .204, .325, .367, .175, .63}},
        {{"POSEIDON", "D+CT", 338, 13.3, 1.2, 60, 14}, {64.5, 32, 87, .251, .322, .379, .249, .663}},
        {{"KEYNOTE-189", "Pembro+CT", 410, 22.0, 1.15, 60, 15}, {65, 34, 84, .38, .454, 0, .117, .634}},
        {{"KEYNOTE-407", "Pembro+CT", 278, 17.2, 1.2, 60, 16}, {65, 29, 87, .209, .263, .975, .079, .633}},
    };
    return arms;
}

constexpr double kAccrualMonths = 18.0;
constexpr double kDropoutPerMonth = 0.004;
constexpr double kRiskStep = 3.0;

ReconstructedIPD simulate(const DemoArm& a) {
    const double rate = std::log(2.0) / std::pow(a.median_os, a.shape);
    std::mt19937_64 rng(a.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    ReconstructedIPD ipd{StudyId{a.study, std::nullopt}, a.arm, {}};
    for (long i = 0; i < a.n; ++i) {
        const double death = std::pow(-std::log(1.0 - unif(rng)) / rate, 1.0 / a.shape);
        const double admin = a.followup - kAccrualMonths * unif(rng);
        const double dropout = -std::log(1.0 - unif(rng)) / kDropoutPerMonth;
        const double censor = std::min(admin, dropout);
        ipd.records.push_back({std::min(death, censor), death <= censor ? 1 : 0});
    }
    return ipd;
}

// KM step function drawn with near-vertical drops, resampled to 500 points.
KMCurve trace_of(const ReconstructedIPD& ipd) {
    const auto km = km_estimator(ipd);
    const double eps = 1e-6;
    std::vector<DataPoint> pts{{0.0, 100.0}};
    double prev = 1.0;
    for (std::size_t i = 0; i < km.times.size(); ++i) {
        if (km.times[i] - eps > pts.back().time) pts.push_back({km.times[i] - eps, prev * 100.0});
        pts.push_back({km.times[i], km.survival[i] * 100.0});
        prev = km.survival[i];
    }
    double t_end = 0.0;
    for (const auto& r : ipd.records) t_end = std::max(t_end, r.time);
    if (t_end > pts.back().time) pts.push_back({t_end, prev * 100.0});
    return standardize_curve(pts, ipd.study, ipd.arm_label).curve;
}

BaselineProfile profile_of(const DemoArm& a, const Baseline& b) {
    auto prop = [](const std::string& name, double p) { return CovariateSummary{name, Proportion{p}}; };
    return {StudyId{a.study, std::nullopt},
            a.arm,
            a.n,
            {{"age", MedianRange{b.age_median, b.age_min, b.age_max}},
             prop("female", b.female),
             prop("ecog0", b.ecog0),
             prop("squamous", b.squamous),
             prop("never_smoker", b.never_smoker),
             prop("pdl1_ge1", b.pdl1_ge1)}};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_demo <output-dir>\n";
        return 1;
    }
    const std::filesystem::path out = argv[1];
    std::vector<KMCurve> curves;
    std::vector<RiskTable> tables;
    std::vector<BaselineProfile> baselines;
    std::map<std::string, std::vector<ReconstructedIPD>> by_study;
    std::vector<std::string> study_order;
    for (const auto& [arm, base] : demo_arms()) {
        auto ipd = simulate(arm);
        curves.push_back(trace_of(ipd));
        baselines.push_back(profile_of(arm, base));
        if (!by_study.count(arm.study)) study_order.push_back(arm.study);
        by_study[arm.study].push_back(std::move(ipd));
    }
    for (const auto& study : study_order) {
        const auto& arms = by_study[study];
        double last = 1e300;
        for (const auto& ipd : arms) {
            double t_end = 0.0;
            for (const auto& r : ipd.records) t_end = std::max(t_end, r.time);
            last = std::min(last, t_end);
        }
        RiskTable rt{StudyId{study, std::nullopt}, {}, {}};
        for (double t = 0.0; t <= last; t += kRiskStep) rt.time_grid.push_back(t);
        for (const auto& ipd : arms) {
            RiskArm ra{ipd.arm_label, {}};
            for (double t : rt.time_grid) ra.counts.push_back(number_at_risk(ipd, t));
            rt.arms.push_back(std::move(ra));
        }
        tables.push_back(std::move(rt));
    }
    io::write_text(out / "xy.csv", io::format_xy(curves));
    io::write_text(out / "risk_table.csv", io::format_risk(tables));
    io::write_text(out / "baseline.csv", io::format_baseline(baselines));

    nlohmann::ordered_json cfg;
    cfg["schema"] = "km-lead v1";
    cfg["xy"] = "xy.csv";
    cfg["risk_table"] = "risk_table.csv";
    cfg["baseline"] = "baseline.csv";
    cfg["output_dir"] = "out";
    cfg["seed"] = 20240601;
    cfg["draws"] = 4000;
    cfg["margin"] = 3.0;
    cfg["report_times"] = {12, 24, 36, 48};
    cfg["similarity"] = {{"covariates", {"age", "female", "ecog0", "squamous", "never_smoker", "pdl1_ge1"}},
                         {"mode", "average"},
                         {"k", 3}};
    cfg["mcmc"] = {{"chains", 4}, {"iters", 20000}, {"burn_in", 10000}, {"thin", 5}};
    auto arm_ref = [](const std::string& s, const std::string& a) { return nlohmann::ordered_json{{"study", s}, {"arm", a}}; };
    cfg["classes"] = {
        {{"name", "mono-ICI"},
         {"arms", {arm_ref("KEYNOTE-189", "Pembro+CT"), arm_ref("KEYNOTE-407", "Pembro+CT"), arm_ref("POSEIDON", "D+CT")}}},
        {{"name", "dual-ICI"},
         {"arms", {arm_ref("CheckMate-9LA", "NIVO+IPI+CT"), arm_ref("CheckMate-227", "NIVO+IPI"), arm_ref("POSEIDON", "T+D+CT")}}},
    };
    io::write_text(out / "demo.json", cfg.dump(2) + "\n");
    std::cout << "wrote " << out.string() << "/{xy.csv,risk_table.csv,baseline.csv,demo.json}\n";
    return 0;
}
