// kmlead: command-line driver for the KM-curve to predictive-prior workflow.
// Exit codes: 0 success, 1 usage or I/O failure, 2 validation error,
// 3 MCMC convergence failure.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>

#include "kmlead/pipeline.hpp"
#include "kmlead/service.hpp"

namespace {

using namespace kmlead;
namespace fs = std::filesystem;

constexpr int kExitIo = 1;
constexpr int kExitValidation = 2;
constexpr int kExitConvergence = 3;

// --seed beats KMLEAD_SEED beats the config file.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t config_seed) {
    if (flag) return *flag;
    if (const char* env = std::getenv("KMLEAD_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            auto v = std::stoull(env, &used);
            if (used == std::string(env).size()) return v;
        } catch (const std::exception&) {
        }
        throw InputError(std::string("KMLEAD_SEED is not a non-negative integer: '") + env + "'");
    }
    return config_seed;
}

pipeline::ArmRef parse_arm_ref(const std::string& s) {
    auto pos = s.find("::");
    if (pos == std::string::npos || pos == 0 || pos + 2 >= s.size())
        throw InputError("arm reference must look like 'STUDY::ARM', got '" + s + "'");
    return {s.substr(0, pos), s.substr(pos + 2)};
}

int report_and_exit(const ValidationReport& rep) {
    std::cout << rep.to_text();
    return rep.has_errors() ? kExitValidation : 0;
}

struct ValidateArgs {
    fs::path xy, risk, baseline;
};

int cmd_validate(const ValidateArgs& a) {
    auto curves = io::parse_xy(io::read_text(a.xy), a.xy.string());
    auto tables = io::parse_risk(io::read_text(a.risk), a.risk.string());
    auto rep = pipeline::validate_files(curves, tables);
    if (!a.baseline.empty()) io::parse_baseline(io::read_text(a.baseline), a.baseline.string());
    if (!rep.has_errors()) std::cout << "ok: " << curves.size() << " curves, " << tables.size() << " risk tables\n";
    return report_and_exit(rep);
}

struct ReconstructArgs {
    fs::path xy, risk, out = "ipd.csv";
};

int cmd_reconstruct(const ReconstructArgs& a) {
    auto curves = io::parse_xy(io::read_text(a.xy), a.xy.string());
    auto tables = io::parse_risk(io::read_text(a.risk), a.risk.string());
    auto rep = pipeline::validate_files(curves, tables);
    if (rep.has_errors()) return report_and_exit(rep);
    io::write_text(a.out, io::format_ipd(pipeline::reconstruct_all(curves, tables)));
    std::cout << "wrote " << a.out.string() << "\n";
    return 0;
}

struct ClusterArgs {
    fs::path baseline, out = "similarity";
    std::string mode = "average";
    std::optional<std::size_t> k;
    std::vector<std::string> covariates;
    std::vector<std::string> profile_arms;  // STUDY::ARM
};

int cmd_cluster(const ClusterArgs& a) {
    auto baselines = io::parse_baseline(io::read_text(a.baseline), a.baseline.string());
    auto mode = parse_mode(a.mode);
    if (!mode) throw InputError("--mode must be 'average' or 'maximum'");
    auto covariates = a.covariates.empty() ? pipeline::default_covariates() : a.covariates;
    ValidationReport rep;
    for (const auto& name : covariates)
        if (std::none_of(baselines.begin(), baselines.end(), [&](const BaselineProfile& p) { return p.find(name) != nullptr; }))
            rep.error("unknown_covariate", "--covariates", "covariate '" + name + "' does not appear in " + a.baseline.string());
    if (rep.has_errors()) return report_and_exit(rep);
    std::map<std::string, std::string> profile_arms;
    for (const auto& s : a.profile_arms) {
        auto ref = parse_arm_ref(s);
        profile_arms[ref.study] = ref.arm;
    }
    auto co = pipeline::cluster_stage(baselines, covariates, *mode, a.k, profile_arms);
    pipeline::write_cluster_outputs(co, *mode, a.out);
    std::cout << clusters_to_json(co.clusters, co.chosen(*mode)).dump(2) << "\n";
    return 0;
}

struct SynthesizeArgs {
    fs::path ipd, risk, config, out;
    std::string name, class_name;
    std::vector<std::string> arms;
    std::optional<std::uint64_t> seed;
    std::optional<int> chains;
    std::optional<long> iters, burn_in, thin;
    std::optional<std::size_t> draws;
    double max_followup = 0.0;
    bool force = false;
};

int cmd_synthesize(const SynthesizeArgs& a) {
    McmcConfig mcmc;
    std::uint64_t seed = 1;
    std::size_t draws = 4000;
    double max_followup = a.max_followup;
    std::vector<pipeline::ArmRef> arms;
    std::vector<pipeline::ArmRef> grid_arms;  // the grid spans every class so ensembles stay comparable
    std::string name = a.name;
    if (!a.config.empty()) {
        auto cfg = pipeline::load_config(a.config);
        mcmc = cfg.mcmc;
        seed = cfg.seed;
        draws = cfg.draws;
        if (max_followup == 0.0) max_followup = cfg.max_followup;
        for (const auto& cls : cfg.classes) grid_arms.insert(grid_arms.end(), cls.arms.begin(), cls.arms.end());
        if (!a.class_name.empty()) {
            auto it = std::find_if(cfg.classes.begin(), cfg.classes.end(),
                                   [&](const pipeline::TreatmentClass& c) { return c.name == a.class_name; });
            if (it == cfg.classes.end()) throw InputError("config has no class named '" + a.class_name + "'");
            arms = it->arms;
            if (name.empty()) name = it->name;
        }
    }
    for (const auto& s : a.arms) arms.push_back(parse_arm_ref(s));
    if (arms.empty()) throw InputError("synthesize: give --arm STUDY::ARM (repeatable) or --config with --class");
    if (name.empty()) name = "class";
    if (a.chains) mcmc.chains = *a.chains;
    if (a.iters) mcmc.iters = *a.iters;
    if (a.burn_in) mcmc.burn_in = *a.burn_in;
    if (a.thin) mcmc.thin = *a.thin;
    if (a.draws) draws = *a.draws;
    mcmc.force = mcmc.force || a.force;
    seed = resolve_seed(a.seed, seed);

    auto ipd = io::parse_ipd(io::read_text(a.ipd), a.ipd.string());
    auto tables = io::parse_risk(io::read_text(a.risk), a.risk.string());
    ValidationReport rep;
    for (const auto& t : tables) rep.merge(validate_risk_table(t));
    if (rep.has_errors()) return report_and_exit(rep);
    for (const auto& ref : arms) pipeline::table_for(tables, ref.study);
    const auto grid = grid_arms.empty() ? choose_grid(tables, max_followup) : pipeline::grid_for(tables, grid_arms, max_followup);
    auto fit = pipeline::synthesize_class(name, pipeline::event_tables(ipd, arms, grid), grid, mcmc, draws, seed, 0);
    const fs::path out = a.out.empty() ? fs::path("synthesis") / pipeline::slug(name) : a.out;
    pipeline::write_class_outputs(fit, out);
    if (!fit.posterior.converged) std::cerr << "warning: split R-hat above threshold; fit kept because --force was given\n";
    std::cout << bsp_fit_to_json(fit.bsp, &fit.posterior).dump(2) << "\n";
    return 0;
}

struct ProjectArgs {
    fs::path reference, experimental, out = "projection";
    std::string ref_name, exp_name;
    double margin = 3.0;
    std::vector<double> times{12, 24, 36, 48, 60, 72};
    std::optional<std::uint64_t> seed;
};

int cmd_project(const ProjectArgs& a) {
    auto load = [](const fs::path& p) {
        const fs::path file = fs::is_directory(p) ? p / "predictive.csv" : p;
        return parse_predictive(io::read_text(file), file.string());
    };
    auto label = [](const fs::path& p, const std::string& given) {
        if (!given.empty()) return given;
        const fs::path base = fs::is_directory(p) ? p : p.parent_path();
        return base.filename().string().empty() ? base.parent_path().filename().string() : base.filename().string();
    };
    const auto ref = load(a.reference);
    const auto exp = load(a.experimental);
    const auto ref_name = label(a.reference, a.ref_name);
    const auto exp_name = label(a.experimental, a.exp_name);
    std::vector<double> times;
    const double last = std::min(ref.grid.last(), exp.grid.last());
    for (double t : a.times)
        if (t <= last) times.push_back(t);
    auto p = pipeline::project_stage(ref_name, ref, exp_name, exp, a.margin, times);
    pipeline::write_projection_outputs(p, ref_name, exp_name, ref, exp, {}, {}, a.out);
    std::cout << comparison_to_json(ref_name, exp_name, p.comparison).dump(2) << "\n";
    return 0;
}

struct PipelineArgs {
    fs::path config, out;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_pipeline(const PipelineArgs& a) {
    auto cfg = pipeline::load_config(a.config);
    cfg.seed = resolve_seed(a.seed, cfg.seed);
    if (!a.out.empty()) cfg.output_dir = a.out;
    cfg.mcmc.force = cfg.mcmc.force || a.force;
    auto r = pipeline::run(cfg);
    std::cout << "seed " << cfg.seed << "; outputs in " << cfg.output_dir.string() << "\n";
    for (const auto& f : r.fits)
        std::cout << f.name << ": c* = " << csv::format_number(f.bsp.c_star)
                  << (f.posterior.converged ? "" : " (not converged, forced)") << "\n";
    std::cout << "P(delta median >= " << csv::format_number(cfg.margin)
              << ") = " << csv::format_number(r.projection.comparison.prob_benefit) << "\n";
    return 0;
}

struct ServeArgs {
    fs::path dir = "session";
    std::string host = "127.0.0.1";
    int port = 8080;
};

httplib::Server* g_server = nullptr;

int cmd_serve(const ServeArgs& a) {
    service::Store store(a.dir);
    httplib::Server srv;
    service::install(srv, store);
    g_server = &srv;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    std::cout << "serving " << a.dir.string() << " on http://" << a.host << ":" << a.port << "\n" << std::flush;
    if (!srv.listen(a.host, a.port)) {
        std::cerr << "error: cannot listen on " << a.host << ":" << a.port << "\n";
        return kExitIo;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kmlead: digitized KM curves to predictive survival priors"};
    app.require_subcommand(1);

    ValidateArgs va;
    auto* validate = app.add_subcommand("validate", "Check xy.csv and risk_table.csv against every input rule");
    validate->add_option("--xy", va.xy, "Digitized curves")->required()->check(CLI::ExistingFile);
    validate->add_option("--risk", va.risk, "Numbers-at-risk tables")->required()->check(CLI::ExistingFile);
    validate->add_option("--baseline", va.baseline, "Baseline characteristics (parsed only)")->check(CLI::ExistingFile);

    ReconstructArgs ra;
    auto* reconstruct = app.add_subcommand("reconstruct", "Reconstruct pseudo-IPD for every curve");
    reconstruct->add_option("--xy", ra.xy)->required()->check(CLI::ExistingFile);
    reconstruct->add_option("--risk", ra.risk)->required()->check(CLI::ExistingFile);
    reconstruct->add_option("--out", ra.out, "Output ipd.csv")->capture_default_str();

    ClusterArgs ca;
    auto* cluster = app.add_subcommand("cluster", "Baseline dissimilarity and k-medoids clustering");
    cluster->add_option("--baseline", ca.baseline)->required()->check(CLI::ExistingFile);
    cluster->add_option("--mode", ca.mode, "average or maximum")->capture_default_str();
    cluster->add_option("--k", ca.k, "Number of clusters (default: silhouette choice)");
    cluster->add_option("--covariates", ca.covariates, "Covariate names")->delimiter(',');
    cluster->add_option("--profile-arm", ca.profile_arms, "STUDY::ARM used as that study's profile (default: pooled)");
    cluster->add_option("--out", ca.out, "Output directory")->capture_default_str();

    SynthesizeArgs sa;
    auto* synthesize = app.add_subcommand("synthesize", "Fit the hierarchical beta-Stacy model for one treatment class");
    synthesize->add_option("--ipd", sa.ipd)->required()->check(CLI::ExistingFile);
    synthesize->add_option("--risk", sa.risk, "Risk tables (define the time grid)")->required()->check(CLI::ExistingFile);
    synthesize->add_option("--config", sa.config, "Pipeline config (MCMC settings, seed, classes)")->check(CLI::ExistingFile);
    synthesize->add_option("--class", sa.class_name, "Class name from --config");
    synthesize->add_option("--arm", sa.arms, "STUDY::ARM (repeatable)");
    synthesize->add_option("--name", sa.name, "Class label");
    synthesize->add_option("--out", sa.out, "Output directory");
    synthesize->add_option("--seed", sa.seed);
    synthesize->add_option("--chains", sa.chains);
    synthesize->add_option("--iters", sa.iters);
    synthesize->add_option("--burn-in", sa.burn_in);
    synthesize->add_option("--thin", sa.thin);
    synthesize->add_option("--draws", sa.draws, "Predictive draws M");
    synthesize->add_option("--max-followup", sa.max_followup, "Extend the grid to this month");
    synthesize->add_flag("--force", sa.force, "Keep fits whose split R-hat exceeds the threshold");

    ProjectArgs pa;
    auto* project = app.add_subcommand("project", "Compare two predictive ensembles");
    project->add_option("--reference", pa.reference, "Reference predictive.csv or its directory")->required()->check(CLI::ExistingPath);
    project->add_option("--experimental", pa.experimental, "Experimental predictive.csv or its directory")
        ->required()
        ->check(CLI::ExistingPath);
    project->add_option("--reference-name", pa.ref_name);
    project->add_option("--experimental-name", pa.exp_name);
    project->add_option("--margin", pa.margin, "Median OS margin in months")->capture_default_str();
    project->add_option("--times", pa.times, "Report times in months")->delimiter(',');
    project->add_option("--out", pa.out)->capture_default_str();

    PipelineArgs pla;
    auto* run = app.add_subcommand("pipeline", "Run every stage from a config file");
    run->add_option("--config", pla.config)->required()->check(CLI::ExistingFile);
    run->add_option("--seed", pla.seed, "Overrides KMLEAD_SEED and the config seed");
    run->add_option("--out", pla.out, "Overrides output_dir");
    run->add_flag("--force", pla.force, "Keep fits whose split R-hat exceeds the threshold");

    ServeArgs sv;
    auto* serve = app.add_subcommand("serve", "HTTP service for the digitization workflow");
    serve->add_option("--dir", sv.dir, "Session directory (workspace.json, figures/)")->capture_default_str();
    serve->add_option("--host", sv.host)->capture_default_str();
    serve->add_option("--port", sv.port)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitIo;
    }

    try {
        if (*validate) return cmd_validate(va);
        if (*reconstruct) return cmd_reconstruct(ra);
        if (*cluster) return cmd_cluster(ca);
        if (*synthesize) return cmd_synthesize(sa);
        if (*project) return cmd_project(pa);
        if (*run) return cmd_pipeline(pla);
        if (*serve) return cmd_serve(sv);
    } catch (const pipeline::ValidationFailed& e) {
        std::cout << e.report.to_text();
        std::cerr << "error: validation failed\n";
        return kExitValidation;
    } catch (const ConvergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConvergence;
    } catch (const ExportBlocked& e) {
        std::cout << e.report.to_text();
        return kExitValidation;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const SchemaError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitIo;
}
