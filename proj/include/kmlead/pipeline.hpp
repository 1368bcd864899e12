#pragma once

// End-to-end driver: validate -> reconstruct -> cluster -> synthesize ->
// project, configured by a JSON file. Every stage is also callable on its own.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kmlead/core.hpp"
#include "kmlead/digitizer.hpp"
#include "kmlead/io.hpp"
#include "kmlead/projection.hpp"
#include "kmlead/reconstructor.hpp"
#include "kmlead/similarity.hpp"
#include "kmlead/synthesis.hpp"

namespace kmlead::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

struct ValidationFailed : Error {
    explicit ValidationFailed(ValidationReport r) : Error("validation failed\n" + r.to_text()), report(std::move(r)) {}
    ValidationReport report;
};

struct ArmRef {
    std::string study;  // rendered study id
    std::string arm;
    friend bool operator==(const ArmRef&, const ArmRef&) = default;
};

struct TreatmentClass {
    std::string name;
    std::vector<ArmRef> arms;
};

inline const std::vector<std::string>& default_covariates() {
    static const std::vector<std::string> c{"age", "female", "ecog0", "squamous", "never_smoker", "pdl1_ge1"};
    return c;
}

struct Config {
    fs::path xy;
    fs::path risk;
    fs::path baseline;
    fs::path output_dir = "out";
    std::vector<std::string> covariates = default_covariates();
    AggregationMode mode = AggregationMode::average;
    std::optional<std::size_t> k;
    std::map<std::string, std::string> profile_arms;  // study -> arm used for its baseline profile
    std::vector<TreatmentClass> classes;              // [reference, experimental]
    McmcConfig mcmc;
    std::uint64_t seed = 1;
    std::size_t draws = 4000;
    double margin = 3.0;
    std::vector<double> report_times{12, 24, 36, 48, 60, 72};
    double max_followup = 0.0;  // 0: last risk-table time
};

// Relative paths resolve against `base_dir` (the config file's directory).
inline Config config_from_json(const json& j, const fs::path& base_dir = {}) {
    auto path = [&](const std::string& key, const fs::path& fallback) {
        fs::path p = j.contains(key) ? fs::path(j.at(key).get<std::string>()) : fallback;
        return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    };
    if (j.contains("schema") && j.at("schema") != "km-lead v1")
        throw SchemaError("config: schema version mismatch: " + j.at("schema").dump());
    Config c;
    try {
        c.xy = path("xy", "xy.csv");
        c.risk = path("risk_table", "risk_table.csv");
        c.baseline = path("baseline", "baseline.csv");
        c.output_dir = path("output_dir", "out");
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        c.draws = j.value("draws", c.draws);
        c.margin = j.value("margin", c.margin);
        c.report_times = j.value("report_times", c.report_times);
        c.max_followup = j.value("max_followup", c.max_followup);
        if (j.contains("similarity")) {
            const auto& s = j.at("similarity");
            c.covariates = s.value("covariates", c.covariates);
            auto mode = parse_mode(s.value("mode", std::string("average")));
            if (!mode) throw InputError("config: similarity.mode must be 'average' or 'maximum'");
            c.mode = *mode;
            if (s.contains("k") && !s.at("k").is_null()) c.k = s.at("k").get<std::size_t>();
            c.profile_arms = s.value("profile_arms", c.profile_arms);
        }
        if (j.contains("mcmc")) {
            const auto& m = j.at("mcmc");
            c.mcmc.chains = m.value("chains", c.mcmc.chains);
            c.mcmc.iters = m.value("iters", c.mcmc.iters);
            c.mcmc.burn_in = m.value("burn_in", c.mcmc.burn_in);
            c.mcmc.thin = m.value("thin", c.mcmc.thin);
            c.mcmc.force = m.value("force", c.mcmc.force);
        }
        for (const auto& cls : j.at("classes")) {
            TreatmentClass tc{cls.at("name").get<std::string>(), {}};
            for (const auto& a : cls.at("arms")) tc.arms.push_back({a.at("study").get<std::string>(), a.at("arm").get<std::string>()});
            if (tc.arms.empty()) throw InputError("config: class '" + tc.name + "' has no arms");
            c.classes.push_back(std::move(tc));
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("config: ") + e.what());
    }
    if (c.classes.size() != 2) throw InputError("config: exactly two treatment classes are required (reference, experimental)");
    if (c.draws < 2) throw InputError("config: draws must be at least 2");
    return c;
}

inline Config load_config(const fs::path& file) {
    auto j = io::parse_json(io::read_text(file), file.string());
    return config_from_json(j, file.parent_path());
}

// Derived per-purpose seeds so stages do not share generator streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (purpose + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct Inputs {
    std::vector<KMCurve> curves;
    std::vector<RiskTable> tables;
    std::vector<BaselineProfile> baselines;
};

inline Inputs read_inputs(const Config& c) {
    Inputs in;
    in.curves = io::parse_xy(io::read_text(c.xy), c.xy.string());
    in.tables = io::parse_risk(io::read_text(c.risk), c.risk.string());
    in.baselines = io::parse_baseline(io::read_text(c.baseline), c.baseline.string());
    return in;
}

// Curve, risk-table, alignment and terminal-month rules over a file bundle.
inline ValidationReport validate_files(const std::vector<KMCurve>& curves, const std::vector<RiskTable>& tables) {
    ValidationReport rep;
    for (const auto& c : curves) rep.merge(validate_curve(c));
    for (const auto& t : tables) rep.merge(validate_risk_table(t));
    rep.merge(validate_bundle(curves, tables));
    for (const auto& c : curves)
        for (const auto& t : tables)
            if (t.study.rendered() == c.study.rendered()) rep.merge(check_terminal_month(c, t));
    return rep;
}

inline ValidationReport validate_config(const Config& c, const Inputs& in) {
    ValidationReport rep;
    for (const auto& name : c.covariates) {
        bool found = false;
        for (const auto& p : in.baselines) found = found || p.find(name) != nullptr;
        if (!found) rep.error("unknown_covariate", "config", "covariate '" + name + "' does not appear in baseline.csv");
    }
    for (const auto& cls : c.classes)
        for (const auto& a : cls.arms) {
            bool found = std::any_of(in.curves.begin(), in.curves.end(), [&](const KMCurve& k) {
                return k.study.rendered() == a.study && k.arm_label == a.arm;
            });
            if (!found) rep.error("unknown_arm", "config", "class '" + cls.name + "' names " + a.study + " / " + a.arm + ", which has no curve");
        }
    return rep;
}

inline const RiskTable& table_for(const std::vector<RiskTable>& tables, const std::string& study) {
    for (const auto& t : tables)
        if (t.study.rendered() == study) return t;
    throw InputError("no risk table for study '" + study + "'");
}

inline ReconstructedIPD reconstruct_arm(const KMCurve& curve, const std::vector<RiskTable>& tables) {
    const auto& rt = table_for(tables, curve.study.rendered());
    const RiskArm* arm = rt.find_arm(curve.arm_label);
    if (!arm) throw InputError("no risk-table arm '" + curve.arm_label + "' in " + rt.study.rendered());
    return reconstruct_ipd(curve, rt.time_grid, arm->counts);
}

inline std::vector<ReconstructedIPD> reconstruct_all(const std::vector<KMCurve>& curves, const std::vector<RiskTable>& tables) {
    std::vector<ReconstructedIPD> out;
    out.reserve(curves.size());
    for (const auto& c : curves) out.push_back(reconstruct_arm(c, tables));
    return out;
}

struct ClusterOutputs {
    DissimilarityMatrix average;
    DissimilarityMatrix maximum;
    ClusteringResult clusters;  // on the configured mode
    const DissimilarityMatrix& chosen(AggregationMode m) const { return m == AggregationMode::average ? average : maximum; }
};

inline ClusterOutputs cluster_stage(const std::vector<BaselineProfile>& baselines, const std::vector<std::string>& covariates,
                                    AggregationMode mode, std::optional<std::size_t> k,
                                    const std::map<std::string, std::string>& profile_arms) {
    auto profiles = select_profiles(baselines, profile_arms);
    ClusterOutputs out{dissimilarity_matrix(profiles, covariates, AggregationMode::average),
                       dissimilarity_matrix(profiles, covariates, AggregationMode::maximum),
                       {}};
    out.clusters = cluster_kmedoids(out.chosen(mode), k);
    return out;
}

inline void write_cluster_outputs(const ClusterOutputs& co, AggregationMode mode, const fs::path& dir) {
    fs::create_directories(dir);
    io::write_text(dir / "dissimilarity.csv", format_dissimilarity({co.average, co.maximum}));
    io::write_text(dir / "clusters.json", clusters_to_json(co.clusters, co.chosen(mode)).dump(2) + "\n");
    io::write_text(dir / "heatmap.csv", format_heatmap(co.chosen(mode)));
}

struct ClassFit {
    std::string name;
    std::vector<EventTable> tables;
    PosteriorSample posterior;
    PredictiveEnsemble ensemble;
    PredictiveBSPFit bsp;
};

inline std::vector<EventTable> event_tables(const std::vector<ReconstructedIPD>& ipd, const std::vector<ArmRef>& arms,
                                            const TimeGrid& grid) {
    std::vector<EventTable> out;
    for (const auto& ref : arms) {
        auto it = std::find_if(ipd.begin(), ipd.end(), [&](const ReconstructedIPD& a) {
            return a.study.rendered() == ref.study && a.arm_label == ref.arm;
        });
        if (it == ipd.end()) throw InputError("no reconstructed IPD for " + ref.study + " / " + ref.arm);
        out.push_back(tabulate_events(discretize(*it, grid), grid));
    }
    return out;
}

// Common grid for a set of arms: finest risk-table spacing, extended to the
// longest follow-up among them.
inline TimeGrid grid_for(const std::vector<RiskTable>& tables, const std::vector<ArmRef>& arms, double max_followup = 0.0) {
    std::vector<RiskTable> used;
    for (const auto& a : arms) {
        const auto& t = table_for(tables, a.study);
        if (std::none_of(used.begin(), used.end(), [&](const RiskTable& u) { return u.study == t.study; })) used.push_back(t);
    }
    return choose_grid(used, max_followup);
}

inline ClassFit synthesize_class(const std::string& name, const std::vector<EventTable>& tables, const TimeGrid& grid,
                                 McmcConfig mcmc, std::size_t draws, std::uint64_t seed, std::uint64_t class_index) {
    mcmc.seed = derive_seed(seed, 2 * class_index);
    ClassFit fit{name, tables, fit_bhm(tables, grid, mcmc), {}, {}};
    fit.ensemble = predictive_draws(fit.posterior, grid, draws, derive_seed(seed, 2 * class_index + 1));
    fit.bsp = fit_predictive_bsp(fit.posterior, fit.ensemble);
    return fit;
}

inline void write_class_outputs(const ClassFit& f, const fs::path& dir) {
    fs::create_directories(dir);
    io::write_text(dir / "posterior.csv", format_posterior(f.posterior));
    io::write_text(dir / "predictive.csv", format_predictive(f.ensemble));
    io::write_text(dir / "bsp_fit.json", bsp_fit_to_json(f.bsp, &f.posterior).dump(2) + "\n");
}

struct Projection {
    std::vector<NamedSummary> os;
    ArmComparison comparison;
};

inline Projection project_stage(const std::string& ref_name, const PredictiveEnsemble& ref, const std::string& exp_name,
                                const PredictiveEnsemble& exp, double margin, const std::vector<double>& times) {
    return {{{ref_name, summarize(ref, times)}, {exp_name, summarize(exp, times)}}, compare(ref, exp, margin, times)};
}

inline void write_projection_outputs(const Projection& p, const std::string& ref_name, const std::string& exp_name,
                                     const PredictiveEnsemble& ref, const PredictiveEnsemble& exp,
                                     const std::vector<KMCurve>& overlays_ref, const std::vector<KMCurve>& overlays_exp,
                                     const fs::path& dir) {
    fs::create_directories(dir);
    io::write_text(dir / "os_table.csv", format_os_table(p.os));
    io::write_text(dir / "comparison.json", comparison_to_json(ref_name, exp_name, p.comparison).dump(2) + "\n");
    io::write_text(dir / "medians.csv", format_medians(ref_name, exp_name, p.comparison));
    io::write_text(dir / "fan.csv", fan_plot_data(ref, overlays_ref, 200, ref_name) + fan_plot_rows(exp, overlays_exp, 200, exp_name));
}

inline std::string slug(const std::string& s) {
    std::string out;
    for (unsigned char ch : s) {
        if (std::isalnum(ch)) out += static_cast<char>(std::tolower(ch));
        else if (!out.empty() && out.back() != '-') out += '-';
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out.empty() ? "class" : out;
}

struct RunResult {
    Inputs inputs;
    std::vector<ReconstructedIPD> ipd;
    ClusterOutputs clusters;
    std::vector<ClassFit> fits;
    Projection projection;
};

inline std::vector<KMCurve> curves_of(const std::vector<KMCurve>& curves, const std::vector<ArmRef>& arms) {
    std::vector<KMCurve> out;
    for (const auto& c : curves)
        for (const auto& a : arms)
            if (c.study.rendered() == a.study && c.arm_label == a.arm) out.push_back(c);
    return out;
}

// Throws ValidationFailed (inputs or config invalid) or ConvergenceError (R-hat).
inline RunResult run(const Config& cfg) {
    RunResult r;
    r.inputs = read_inputs(cfg);
    auto rep = validate_files(r.inputs.curves, r.inputs.tables);
    rep.merge(validate_config(cfg, r.inputs));
    if (rep.has_errors()) throw ValidationFailed(rep);

    const fs::path out = cfg.output_dir;
    fs::create_directories(out);

    r.ipd = reconstruct_all(r.inputs.curves, r.inputs.tables);
    io::write_text(out / "ipd.csv", io::format_ipd(r.ipd));

    r.clusters = cluster_stage(r.inputs.baselines, cfg.covariates, cfg.mode, cfg.k, cfg.profile_arms);
    write_cluster_outputs(r.clusters, cfg.mode, out / "similarity");

    std::vector<ArmRef> all_arms;
    for (const auto& cls : cfg.classes) all_arms.insert(all_arms.end(), cls.arms.begin(), cls.arms.end());
    const TimeGrid grid = grid_for(r.inputs.tables, all_arms, cfg.max_followup);
    for (std::size_t i = 0; i < cfg.classes.size(); ++i) {
        const auto& cls = cfg.classes[i];
        auto tables = event_tables(r.ipd, cls.arms, grid);
        r.fits.push_back(synthesize_class(cls.name, tables, grid, cfg.mcmc, cfg.draws, cfg.seed, i));
        write_class_outputs(r.fits.back(), out / "synthesis" / slug(cls.name));
    }

    std::vector<double> times;
    for (double t : cfg.report_times)
        if (t <= grid.last()) times.push_back(t);
    const auto& ref = r.fits[0];
    const auto& exp = r.fits[1];
    r.projection = project_stage(ref.name, ref.ensemble, exp.name, exp.ensemble, cfg.margin, times);
    write_projection_outputs(r.projection, ref.name, exp.name, ref.ensemble, exp.ensemble,
                             curves_of(r.inputs.curves, cfg.classes[0].arms), curves_of(r.inputs.curves, cfg.classes[1].arms),
                             out / "projection");
    return r;
}

}  // namespace kmlead::pipeline
