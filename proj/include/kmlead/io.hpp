#pragma once

// File formats: xy.csv, risk_table.csv, ipd.csv, baseline.csv, workspace.json.
// Every CSV starts with the schema line "# km-lead v1". UTF-8, LF, '.' decimal.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kmlead/core.hpp"
#include "kmlead/csv.hpp"
#include "kmlead/digitizer.hpp"

namespace kmlead::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline const std::vector<std::string> kXyHeader{"study_id", "arm", "time_months", "survival_pct"};
inline const std::vector<std::string> kRiskHeader{"study_id", "arm", "time_months", "n_risk"};
inline const std::vector<std::string> kIpdHeader{"study_id", "arm", "time_months", "event"};
inline const std::vector<std::string> kBaselineHeader{"study_id", "arm", "n", "covariate", "kind", "v1", "v2", "v3"};

// ---------------------------------------------------------------------------
// file helpers
// ---------------------------------------------------------------------------
inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InputError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + p.string() + "'");
    out << text;
}

namespace detail {

// Groups rows by (study_id, arm) preserving first-appearance order.
template <class Fn>
void for_each_group(const csv::Document& doc, Fn&& fn) {
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, std::vector<const csv::Row*>> groups;
    for (const auto& r : doc.rows) {
        auto key = std::make_pair(r.fields[0].text, r.fields[1].text);
        auto [it, fresh] = groups.try_emplace(key);
        if (fresh) order.push_back(key);
        it->second.push_back(&r);
    }
    for (const auto& k : order) fn(k.first, k.second, groups[k]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// xy.csv
// ---------------------------------------------------------------------------
inline std::string format_xy(const std::vector<KMCurve>& curves) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line(kXyHeader);
    for (const auto& c : curves) out += xy_rows(c);
    return out;
}

inline std::vector<KMCurve> parse_xy(const std::string& text, const std::string& file = "xy.csv") {
    std::istringstream in(text);
    auto doc = csv::read(in, file, kXyHeader);
    std::vector<KMCurve> curves;
    detail::for_each_group(doc, [&](const std::string& sid, const std::string& arm, const auto& rows) {
        KMCurve c{StudyId::parse(sid), arm, {}};
        c.points.reserve(rows.size());
        for (const auto* r : rows) {
            double t = csv::to_double(r->fields[2], r->line, file);
            double s = csv::to_double(r->fields[3], r->line, file);
            if (t < 0) throw ParseError(file, r->line, r->fields[2].column, "negative time");
            if (s < 0 || s > 100)
                throw ParseError(file, r->line, r->fields[3].column, "survival_pct outside [0, 100]");
            c.points.push_back({t, csv::percent_to_prob(r->fields[3].text)});
        }
        curves.push_back(std::move(c));
    });
    return curves;
}

// ---------------------------------------------------------------------------
// risk_table.csv
// ---------------------------------------------------------------------------
inline std::string format_risk(const std::vector<RiskTable>& tables) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line(kRiskHeader);
    for (const auto& t : tables)
        for (const auto& a : t.arms) out += risk_rows(t.study, a.arm_label, t.time_grid, a.counts);
    return out;
}

// Arms of one study share a time grid; the longest arm defines it and shorter
// arms must follow a prefix of it (they are then reported as ragged).
inline std::vector<RiskTable> parse_risk(const std::string& text, const std::string& file = "risk_table.csv") {
    std::istringstream in(text);
    auto doc = csv::read(in, file, kRiskHeader);

    struct ArmRows {
        std::string arm;
        std::vector<double> times;
        std::vector<long> counts;
        std::size_t line;
    };
    std::vector<std::string> order;
    std::map<std::string, std::vector<ArmRows>> by_study;

    detail::for_each_group(doc, [&](const std::string& sid, const std::string& arm, const auto& rows) {
        ArmRows ar{arm, {}, {}, rows.front()->line};
        for (const auto* r : rows) {
            ar.times.push_back(csv::to_double(r->fields[2], r->line, file));
            ar.counts.push_back(csv::to_long(r->fields[3], r->line, file));
        }
        if (!by_study.count(sid)) order.push_back(sid);
        by_study[sid].push_back(std::move(ar));
    });

    std::vector<RiskTable> out;
    for (const auto& sid : order) {
        auto& arms = by_study[sid];
        RiskTable t{StudyId::parse(sid), {}, {}};
        for (const auto& a : arms)
            if (a.times.size() > t.time_grid.size()) t.time_grid = a.times;
        for (auto& a : arms) {
            if (!std::equal(a.times.begin(), a.times.end(), t.time_grid.begin()))
                throw ParseError(file, a.line, 3, "arm '" + a.arm + "' time grid differs from study grid");
            t.arms.push_back({a.arm, std::move(a.counts)});
        }
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ipd.csv
// ---------------------------------------------------------------------------
inline std::string format_ipd(const std::vector<ReconstructedIPD>& arms) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line(kIpdHeader);
    for (const auto& a : arms) {
        const auto sid = csv::quote(a.study.rendered());
        const auto arm = csv::quote(a.arm_label);
        for (const auto& r : a.records)
            out += sid + "," + arm + "," + csv::format_number(r.time) + "," + std::to_string(r.event) + "\n";
    }
    return out;
}

inline std::vector<ReconstructedIPD> parse_ipd(const std::string& text, const std::string& file = "ipd.csv") {
    std::istringstream in(text);
    auto doc = csv::read(in, file, kIpdHeader);
    std::vector<ReconstructedIPD> out;
    detail::for_each_group(doc, [&](const std::string& sid, const std::string& arm, const auto& rows) {
        ReconstructedIPD ipd{StudyId::parse(sid), arm, {}};
        ipd.records.reserve(rows.size());
        for (const auto* r : rows) {
            double t = csv::to_double(r->fields[2], r->line, file);
            long e = csv::to_long(r->fields[3], r->line, file);
            if (!(t > 0)) throw ParseError(file, r->line, r->fields[2].column, "follow-up time must be > 0");
            if (e != 0 && e != 1) throw ParseError(file, r->line, r->fields[3].column, "event must be 0 or 1");
            ipd.records.push_back({t, static_cast<int>(e)});
        }
        out.push_back(std::move(ipd));
    });
    return out;
}

// ---------------------------------------------------------------------------
// baseline.csv
// ---------------------------------------------------------------------------
inline std::string format_baseline(const std::vector<BaselineProfile>& profiles) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line(kBaselineHeader);
    for (const auto& p : profiles) {
        const auto prefix = csv::quote(p.study.rendered()) + "," + csv::quote(p.arm_label) + "," + std::to_string(p.n);
        for (const auto& c : p.covariates) {
            out += prefix + "," + csv::quote(c.name) + "," + to_string(c.kind()) + ",";
            std::visit(
                [&](const auto& v) {
                    using T = std::decay_t<decltype(v)>;
                    if constexpr (std::is_same_v<T, MeanSd>)
                        out += csv::format_number(v.mean) + "," + csv::format_number(v.sd) + ",";
                    else if constexpr (std::is_same_v<T, MedianRange>)
                        out += csv::format_number(v.median) + "," + csv::format_number(v.min) + "," +
                               csv::format_number(v.max);
                    else
                        out += csv::format_number(v.p) + ",,";
                },
                c.values);
            out += "\n";
        }
    }
    return out;
}

inline std::vector<BaselineProfile> parse_baseline(const std::string& text, const std::string& file = "baseline.csv") {
    std::istringstream in(text);
    auto doc = csv::read(in, file, kBaselineHeader);
    std::vector<BaselineProfile> out;
    detail::for_each_group(doc, [&](const std::string& sid, const std::string& arm, const auto& rows) {
        BaselineProfile p{StudyId::parse(sid), arm, 0, {}};
        p.n = csv::to_long(rows.front()->fields[2], rows.front()->line, file);
        for (const auto* r : rows) {
            const auto& f = r->fields;
            if (csv::to_long(f[2], r->line, file) != p.n)
                throw ParseError(file, r->line, f[2].column, "inconsistent n within one arm");
            if (p.find(f[3].text)) throw ParseError(file, r->line, f[3].column, "duplicate covariate '" + f[3].text + "'");
            auto kind = parse_covariate_kind(f[4].text);
            if (!kind) throw ParseError(file, r->line, f[4].column, "unknown kind '" + f[4].text + "'");
            CovariateSummary c{f[3].text, Proportion{}};
            switch (*kind) {
                case CovariateKind::continuous_mean_sd: {
                    MeanSd v{csv::to_double(f[5], r->line, file), csv::to_double(f[6], r->line, file)};
                    if (v.sd < 0) throw ParseError(file, r->line, f[6].column, "sd must be >= 0");
                    c.values = v;
                    break;
                }
                case CovariateKind::continuous_median_range: {
                    MedianRange v{csv::to_double(f[5], r->line, file), csv::to_double(f[6], r->line, file),
                                  csv::to_double(f[7], r->line, file)};
                    if (!(v.min <= v.median && v.median <= v.max))
                        throw ParseError(file, r->line, f[5].column, "need min <= median <= max");
                    c.values = v;
                    break;
                }
                case CovariateKind::binary_proportion: {
                    Proportion v{csv::to_double(f[5], r->line, file)};
                    if (v.p < 0 || v.p > 1) throw ParseError(file, r->line, f[5].column, "proportion outside [0, 1]");
                    c.values = v;
                    break;
                }
            }
            p.covariates.push_back(std::move(c));
        }
        out.push_back(std::move(p));
    });
    return out;
}

// ---------------------------------------------------------------------------
// workspace.json
// ---------------------------------------------------------------------------
struct ArmKey {
    std::string study;  // rendered
    std::string arm;
    friend bool operator==(const ArmKey&, const ArmKey&) = default;
    friend auto operator<=>(const ArmKey&, const ArmKey&) = default;
};

struct Workspace {
    std::vector<KMCurve> curves;
    std::vector<RiskTable> risk_tables;
    std::vector<ReconstructedIPD> ipd;
    std::vector<BaselineProfile> baselines;
    std::map<ArmKey, CalibrationAnchors> anchors;
    std::map<std::string, std::vector<CellDiff>> adjudication_logs;  // by rendered study id

    friend bool operator==(const Workspace&, const Workspace&) = default;
};

inline json anchors_to_json(const CalibrationAnchors& a) {
    return {{"origin", {a.origin_px.u, a.origin_px.v}},
            {"xmax", {a.xmax_px.u, a.xmax_px.v, a.max_months}},
            {"ytop", {a.ytop_px.u, a.ytop_px.v}}};
}

inline CalibrationAnchors anchors_from_json(const json& j) {
    const auto& o = j.at("origin");
    const auto& x = j.at("xmax");
    const auto& y = j.at("ytop");
    if (o.size() != 2 || x.size() != 3 || y.size() != 2)
        throw InputError("anchors: expected origin:[u,v], xmax:[u,v,max_months], ytop:[u,v]");
    return {{o[0].get<double>(), o[1].get<double>()},
            {x[0].get<double>(), x[1].get<double>()},
            {y[0].get<double>(), y[1].get<double>()},
            x[2].get<double>()};
}

inline json cell_diff_to_json(const CellDiff& d) {
    return {{"arm", d.arm_label},          {"index", d.index},
            {"primary", d.primary_value},  {"fallback", d.fallback_value},
            {"resolved", d.resolved_value}, {"resolution", to_string(d.resolution)},
            {"reason", d.reason}};
}

inline CellDiff cell_diff_from_json(const json& j) {
    CellDiff d;
    d.arm_label = j.at("arm").get<std::string>();
    d.index = j.at("index").get<std::size_t>();
    d.primary_value = j.at("primary").get<long>();
    d.fallback_value = j.at("fallback").get<long>();
    d.resolved_value = j.at("resolved").get<long>();
    auto r = j.at("resolution").get<std::string>();
    d.resolution = r == "primary" ? Resolution::primary : r == "fallback" ? Resolution::fallback : Resolution::unresolved;
    d.reason = j.at("reason").get<std::string>();
    return d;
}

inline json risk_table_to_json(const RiskTable& t) {
    json arms = json::array();
    for (const auto& a : t.arms) arms.push_back({{"arm", a.arm_label}, {"counts", a.counts}});
    return {{"study_id", t.study.rendered()}, {"time_grid", t.time_grid}, {"arms", arms}};
}

inline RiskTable risk_table_from_json(const json& j) {
    RiskTable t;
    t.study = StudyId::parse(j.value("study_id", std::string{}));
    t.time_grid = j.at("time_grid").get<std::vector<double>>();
    for (const auto& a : j.at("arms")) t.arms.push_back({a.at("arm").get<std::string>(), a.at("counts").get<std::vector<long>>()});
    return t;
}

inline json curve_to_json(const KMCurve& c) {
    json pts = json::array();
    for (const auto& p : c.points) {
        auto pct = csv::format_percent(p.survival);
        if (csv::significant_digits(pct) <= 17) pts.push_back({p.time, csv::parse_number(pct)});
        else pts.push_back({p.time, pct});
    }
    return {{"study_id", c.study.rendered()}, {"arm", c.arm_label}, {"points", pts}};
}

inline KMCurve curve_from_json(const json& j) {
    KMCurve c{StudyId::parse(j.at("study_id").get<std::string>()), j.at("arm").get<std::string>(), {}};
    for (const auto& p : j.at("points")) {
        const double prob = p[1].is_string() ? csv::percent_to_prob(p[1].get<std::string>()) : p[1].get<double>() / 100.0;
        c.points.push_back({p[0].get<double>(), prob});
    }
    return c;
}

inline json workspace_to_json(const Workspace& ws) {
    json j;
    j["schema"] = "km-lead v1";
    j["curves"] = json::array();
    for (const auto& c : ws.curves) j["curves"].push_back(curve_to_json(c));
    j["risk_tables"] = json::array();
    for (const auto& t : ws.risk_tables) j["risk_tables"].push_back(risk_table_to_json(t));
    j["ipd"] = json::array();
    for (const auto& a : ws.ipd) {
        json recs = json::array();
        for (const auto& r : a.records) recs.push_back({r.time, r.event});
        j["ipd"].push_back({{"study_id", a.study.rendered()}, {"arm", a.arm_label}, {"records", recs}});
    }
    // baselines travel as their CSV text so both paths share one codec
    j["baseline_csv"] = ws.baselines.empty() ? std::string{} : format_baseline(ws.baselines);
    j["anchors"] = json::array();
    for (const auto& [k, a] : ws.anchors) {
        auto aj = anchors_to_json(a);
        aj["study_id"] = k.study;
        aj["arm"] = k.arm;
        j["anchors"].push_back(aj);
    }
    j["adjudication_logs"] = json::object();
    for (const auto& [sid, diffs] : ws.adjudication_logs) {
        json arr = json::array();
        for (const auto& d : diffs) arr.push_back(cell_diff_to_json(d));
        j["adjudication_logs"][sid] = arr;
    }
    return j;
}

inline Workspace workspace_from_json(const json& j) {
    if (j.value("schema", std::string{}) != "km-lead v1")
        throw SchemaError("workspace.json: schema version mismatch: '" + j.value("schema", std::string{}) + "'");
    Workspace ws;
    for (const auto& c : j.at("curves")) ws.curves.push_back(curve_from_json(c));
    for (const auto& t : j.at("risk_tables")) ws.risk_tables.push_back(risk_table_from_json(t));
    for (const auto& a : j.at("ipd")) {
        ReconstructedIPD ipd{StudyId::parse(a.at("study_id").get<std::string>()), a.at("arm").get<std::string>(), {}};
        for (const auto& r : a.at("records")) ipd.records.push_back({r[0].get<double>(), r[1].get<int>()});
        ws.ipd.push_back(std::move(ipd));
    }
    auto bcsv = j.value("baseline_csv", std::string{});
    if (!bcsv.empty()) ws.baselines = parse_baseline(bcsv, "workspace.json#baseline");
    for (const auto& a : j.at("anchors"))
        ws.anchors[{a.at("study_id").get<std::string>(), a.at("arm").get<std::string>()}] = anchors_from_json(a);
    for (const auto& [sid, arr] : j.at("adjudication_logs").items()) {
        auto& v = ws.adjudication_logs[sid];
        for (const auto& d : arr) v.push_back(cell_diff_from_json(d));
    }
    return ws;
}

inline json parse_json(const std::string& text, const std::string& file) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // nlohmann reports a byte offset; convert to line/column
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ParseError(file, line, col, e.what());
    }
}

// Writes the CSV exports and workspace.json into `dir`.
inline void write_workspace(const Workspace& ws, const fs::path& dir) {
    fs::create_directories(dir);
    write_text(dir / "xy.csv", format_xy(ws.curves));
    write_text(dir / "risk_table.csv", format_risk(ws.risk_tables));
    write_text(dir / "ipd.csv", format_ipd(ws.ipd));
    write_text(dir / "baseline.csv", format_baseline(ws.baselines));
    write_text(dir / "workspace.json", workspace_to_json(ws).dump(2) + "\n");
}

// Reads workspace.json when present; otherwise assembles from whichever CSVs exist.
inline Workspace read_workspace(const fs::path& path) {
    if (fs::is_regular_file(path)) return workspace_from_json(parse_json(read_text(path), path.string()));
    if (!fs::is_directory(path)) throw InputError("no workspace at '" + path.string() + "'");
    if (fs::exists(path / "workspace.json"))
        return workspace_from_json(parse_json(read_text(path / "workspace.json"), (path / "workspace.json").string()));
    Workspace ws;
    if (fs::exists(path / "xy.csv")) ws.curves = parse_xy(read_text(path / "xy.csv"), (path / "xy.csv").string());
    if (fs::exists(path / "risk_table.csv"))
        ws.risk_tables = parse_risk(read_text(path / "risk_table.csv"), (path / "risk_table.csv").string());
    if (fs::exists(path / "ipd.csv")) ws.ipd = parse_ipd(read_text(path / "ipd.csv"), (path / "ipd.csv").string());
    if (fs::exists(path / "baseline.csv"))
        ws.baselines = parse_baseline(read_text(path / "baseline.csv"), (path / "baseline.csv").string());
    return ws;
}

}  // namespace kmlead::io
