#pragma once

// HTTP+JSON service for the interactive digitization loop. Study state lives
// in immutable snapshots: writers take a per-study lock, copy, mutate,
// publish; readers load the current snapshot without locking. Every
// successful mutation rewrites workspace.json in the session directory.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "kmlead/core.hpp"
#include "kmlead/digitizer.hpp"
#include "kmlead/io.hpp"

namespace kmlead::service {

namespace fs = std::filesystem;
using nlohmann::json;

enum class ArmState { uploaded, calibrated, traced, matched, validated, exported };

inline const char* to_string(ArmState s) {
    switch (s) {
        case ArmState::uploaded: return "uploaded";
        case ArmState::calibrated: return "calibrated";
        case ArmState::traced: return "traced";
        case ArmState::matched: return "matched";
        case ArmState::validated: return "validated";
        case ArmState::exported: return "exported";
    }
    return "?";
}

inline std::optional<ArmState> parse_arm_state(const std::string& s) {
    for (auto st : {ArmState::uploaded, ArmState::calibrated, ArmState::traced, ArmState::matched, ArmState::validated,
                    ArmState::exported})
        if (s == to_string(st)) return st;
    return std::nullopt;
}

struct Figure {
    std::string id;
    std::string content_type;
    std::string file;  // blob file name inside <session>/figures
    std::size_t bytes = 0;
    friend bool operator==(const Figure&, const Figure&) = default;
};

struct ArmSession {
    ArmState state = ArmState::uploaded;  // stored states: uploaded..matched, exported
    std::vector<PixelPoint> pixels;
    std::optional<KMCurve> curve;
    ValidationReport trace_report;
};

struct StudySession {
    std::string id;
    StudyId study;
    std::vector<Figure> figures;
    std::optional<CalibrationAnchors> anchors;
    std::map<std::string, ArmSession> arms;
    json risk_payload;  // last accepted risk_table request body, kept for idempotency and replay
    std::optional<AdjudicationResult> adjudication;
    ArmMapping mapping;
    bool exported = false;
    std::string xy_csv;
    std::string risk_csv;
};

struct Response {
    int status = 200;
    json body;
    std::string text;  // non-JSON payloads (CSV exports)
    std::string content_type = "application/json";
};

inline Response error_response(int status, const std::string& message, json extra = json::object()) {
    extra["error"] = message;
    return {status, std::move(extra), {}, "application/json"};
}

inline json findings_to_json(const ValidationReport& rep) {
    json arr = json::array();
    for (const auto& f : rep.findings)
        arr.push_back({{"severity", f.severity == Severity::error ? "error" : "warning"},
                       {"code", f.code},
                       {"location", f.location},
                       {"message", f.message}});
    return arr;
}

// CandidateTable JSON: {source, confidence?, table: {study_id?, time_grid, arms: [{arm, counts}]}}
inline CandidateTable candidate_from_json(const json& j, const StudyId& study) {
    CandidateTable c;
    auto tag = parse_source_tag(j.value("source", std::string("manual")));
    if (!tag) throw InputError("risk_table: unknown source tag '" + j.value("source", std::string{}) + "'");
    c.source_tag = *tag;
    if (j.contains("confidence") && !j.at("confidence").is_null()) c.confidence = j.at("confidence").get<double>();
    c.payload = io::risk_table_from_json(j.at("table"));
    c.payload.study = study;
    return c;
}

namespace detail {

inline json study_summary(const StudySession& s, const std::map<std::string, ValidationReport>* per_arm = nullptr);

}  // namespace detail

class Store {
public:
    explicit Store(fs::path dir) : dir_(std::move(dir)) {
        fs::create_directories(dir_ / "figures");
        if (fs::exists(dir_ / "workspace.json")) load();
    }

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    const fs::path& directory() const { return dir_; }

    Response create_study(const json& body) {
        StudyId sid;
        if (body.contains("study_id")) sid = StudyId::parse(body.at("study_id").get<std::string>());
        else sid = {body.at("trial_name").get<std::string>(),
                    body.contains("subfigure_qualifier") && !body.at("subfigure_qualifier").is_null()
                        ? std::optional<std::string>(body.at("subfigure_qualifier").get<std::string>())
                        : std::nullopt};
        if (sid.trial_name.empty()) return error_response(400, "study_id must not be empty");
        std::shared_ptr<Entry> entry;
        bool created = false;
        {
            std::lock_guard lock(registry_mutex_);
            for (const auto& e : order_) {
                auto snap = std::atomic_load(&e->snapshot);
                if (snap->study.rendered() == sid.rendered()) entry = e;
            }
            if (!entry) {
                auto s = std::make_shared<StudySession>();
                s->id = "s" + std::to_string(++counter_);
                s->study = sid;
                entry = std::make_shared<Entry>();
                entry->snapshot = s;
                order_.push_back(entry);
                by_id_[s->id] = entry;
                created = true;
            }
        }
        if (created) persist();
        auto snap = std::atomic_load(&entry->snapshot);
        return {created ? 201 : 200, {{"id", snap->id}, {"study_id", snap->study.rendered()}}, {}, "application/json"};
    }

    Response upload_figure(const std::string& id, const std::string& blob, const std::string& content_type) {
        if (blob.empty()) return error_response(400, "empty figure upload");
        return mutate(id, [&](StudySession& s) -> Response {
            for (const auto& f : s.figures)
                if (f.bytes == blob.size() && io::read_text(dir_ / "figures" / f.file) == blob)
                    return {200, {{"figure_id", f.id}}, {}, "application/json"};
            if (s.exported) return error_response(409, "study already exported");
            Figure f{"f" + std::to_string(s.figures.size() + 1), content_type, s.id + "-" + std::to_string(s.figures.size() + 1) + ".bin",
                     blob.size()};
            io::write_text(dir_ / "figures" / f.file, blob);
            s.figures.push_back(f);
            return {201, {{"figure_id", f.id}}, {}, "application/json"};
        });
    }

    Response put_anchors(const std::string& id, const std::string& arm, const json& body) {
        CalibrationAnchors a = io::anchors_from_json(body);
        return mutate(id, [&](StudySession& s) -> Response {
            if (s.figures.empty()) return error_response(409, "upload a figure before calibrating");
            solve_affine(a);  // CalibrationError / InputError -> 422
            if (s.anchors && *s.anchors == a) {
                auto& st = s.arms[arm];
                st.state = std::max(st.state, ArmState::calibrated);
                return {200, anchors_body(s), {}, "application/json"};
            }
            if (s.exported) return error_response(409, "study already exported");
            if (s.anchors) {
                for (const auto& [label, st] : s.arms)
                    if (st.state > ArmState::calibrated)
                        return error_response(409, "calibration is shared by all arms and arm '" + label +
                                                       "' is already " + to_string(st.state));
            }
            s.anchors = a;
            s.arms.try_emplace(arm);
            for (auto& [label, st] : s.arms) st.state = std::max(st.state, ArmState::calibrated);
            return {200, anchors_body(s), {}, "application/json"};
        });
    }

    Response put_trace(const std::string& id, const std::string& arm, const json& body) {
        if (body.contains("arm") && body.at("arm").get<std::string>() != arm)
            return error_response(400, "payload arm does not match the URL");
        std::vector<PixelPoint> pixels;
        for (const auto& p : body.at("pixels")) {
            if (!p.is_array() || p.size() != 2) throw InputError("pixels must be [u, v] pairs");
            pixels.push_back({p[0].get<double>(), p[1].get<double>()});
        }
        return mutate(id, [&](StudySession& s) -> Response {
            if (body.contains("study_id") && body.at("study_id").get<std::string>() != s.study.rendered() &&
                body.at("study_id").get<std::string>() != s.id)
                return error_response(400, "payload study_id does not match the study");
            if (!s.anchors) return error_response(409, "calibrate before tracing");
            auto& st = s.arms[arm];
            if (st.curve && st.pixels == pixels) return {200, trace_body(s, arm), {}, "application/json"};
            if (s.exported) return error_response(409, "study already exported");
            auto map = solve_affine(*s.anchors);
            auto sc = standardize_curve(transform_trace(pixels, map), s.study, arm);
            st.pixels = std::move(pixels);
            st.curve = std::move(sc.curve);
            st.trace_report = std::move(sc.report);
            st.state = std::max(st.state, ArmState::traced);
            rematch(s);
            return {200, trace_body(s, arm), {}, "application/json"};
        });
    }

    // Body: one CandidateTable object, or an array of one or two.
    Response put_risk_table(const std::string& id, const json& body) {
        return mutate(id, [&](StudySession& s) -> Response {
            if (s.adjudication && s.risk_payload == body) return {200, risk_body(s), {}, "application/json"};
            if (s.figures.empty()) return error_response(409, "upload a figure before entering its risk table");
            if (s.exported) return error_response(409, "study already exported");
            s.adjudication = adjudicate_payload(body, s.study);
            s.risk_payload = body;
            rematch(s);
            return {200, risk_body(s), {}, "application/json"};
        });
    }

    Response get_validation(const std::string& id) const {
        auto snap = snapshot(id);
        if (!snap) return error_response(404, "unknown study '" + id + "'");
        auto per_arm = arm_reports(*snap);
        ValidationReport study_rep;
        if (snap->adjudication) study_rep.merge(snap->adjudication->report);
        bool ok = !study_rep.has_errors() && !snap->arms.empty();
        for (const auto& [label, st] : snap->arms) ok = ok && effective_state(*snap, label, per_arm) >= ArmState::validated;
        json body = detail::study_summary(*snap, &per_arm);
        body["ok"] = ok;
        body["findings"] = findings_to_json(study_rep);
        return {200, body, {}, "application/json"};
    }

    Response get_study(const std::string& id) const {
        auto snap = snapshot(id);
        if (!snap) return error_response(404, "unknown study '" + id + "'");
        auto per_arm = arm_reports(*snap);
        return {200, detail::study_summary(*snap, &per_arm), {}, "application/json"};
    }

    Response list_studies() const {
        json arr = json::array();
        std::lock_guard lock(registry_mutex_);
        for (const auto& e : order_) {
            auto snap = std::atomic_load(&e->snapshot);
            arr.push_back({{"id", snap->id}, {"study_id", snap->study.rendered()}});
        }
        return {200, arr, {}, "application/json"};
    }

    Response post_export(const std::string& id) {
        return mutate(id, [&](StudySession& s) -> Response {
            if (s.exported) return {200, export_body(s), {}, "application/json"};
            if (!s.anchors) return error_response(409, "export requires calibration");
            if (s.arms.empty()) return error_response(409, "export requires at least one traced arm");
            for (const auto& [label, st] : s.arms)
                if (st.state < ArmState::matched)
                    return error_response(409, "arm '" + label + "' is " + std::string(to_string(st.state)) +
                                                   "; it must be traced and matched before export");
            ValidationReport rep;
            if (s.adjudication) rep.merge(s.adjudication->report);
            std::string xy, risk;
            for (const auto& [label, st] : s.arms) {
                try {
                    auto frag = finalize_arm(*st.curve, s.mapping, s.adjudication->table);
                    xy += frag.xy_rows;
                    risk += frag.risk_rows;
                } catch (const ExportBlocked& e) {
                    rep.merge(e.report);
                }
            }
            if (rep.has_errors()) return error_response(422, "export blocked by validation errors", {{"findings", findings_to_json(rep)}});
            s.xy_csv = std::string(kSchemaTag) + "\n" + csv::header_line(io::kXyHeader) + xy;
            s.risk_csv = std::string(kSchemaTag) + "\n" + csv::header_line(io::kRiskHeader) + risk;
            s.exported = true;
            for (auto& [label, st] : s.arms) st.state = ArmState::exported;
            return {200, export_body(s), {}, "application/json"};
        });
    }

    Response get_export(const std::string& id, const std::string& file) const {
        auto snap = snapshot(id);
        if (!snap) return error_response(404, "unknown study '" + id + "'");
        if (file != "xy.csv" && file != "risk_table.csv") return error_response(404, "unknown export '" + file + "'");
        if (!snap->exported) return error_response(409, "study has not been exported");
        return {200, nullptr, file == "xy.csv" ? snap->xy_csv : snap->risk_csv, "text/csv"};
    }

    // Workspace view of everything traced, adjudicated or calibrated so far.
    io::Workspace workspace() const {
        io::Workspace ws;
        for (const auto& snap : all_snapshots()) {
            for (const auto& [label, st] : snap->arms) {
                if (st.curve) ws.curves.push_back(*st.curve);
                if (snap->anchors) ws.anchors[{snap->study.rendered(), label}] = *snap->anchors;
            }
            if (snap->adjudication) {
                ws.risk_tables.push_back(snap->adjudication->table);
                ws.adjudication_logs[snap->study.rendered()] = snap->adjudication->diffs;
            }
        }
        return ws;
    }

private:
    struct Entry {
        std::mutex write;
        std::shared_ptr<const StudySession> snapshot;
    };

    fs::path dir_;
    mutable std::mutex registry_mutex_;
    std::vector<std::shared_ptr<Entry>> order_;
    std::map<std::string, std::shared_ptr<Entry>> by_id_;
    long counter_ = 0;
    std::mutex persist_mutex_;

    std::shared_ptr<Entry> entry(const std::string& id) const {
        std::lock_guard lock(registry_mutex_);
        auto it = by_id_.find(id);
        return it == by_id_.end() ? nullptr : it->second;
    }

    std::shared_ptr<const StudySession> snapshot(const std::string& id) const {
        auto e = entry(id);
        return e ? std::atomic_load(&e->snapshot) : nullptr;
    }

    std::vector<std::shared_ptr<const StudySession>> all_snapshots() const {
        std::vector<std::shared_ptr<const StudySession>> out;
        std::lock_guard lock(registry_mutex_);
        for (const auto& e : order_) out.push_back(std::atomic_load(&e->snapshot));
        return out;
    }

    // Copy, mutate, publish (only on 2xx), then persist.
    template <class Fn>
    Response mutate(const std::string& id, Fn&& fn) {
        auto e = entry(id);
        if (!e) return error_response(404, "unknown study '" + id + "'");
        Response r;
        {
            std::lock_guard lock(e->write);
            auto draft = std::make_shared<StudySession>(*std::atomic_load(&e->snapshot));
            r = fn(*draft);
            if (r.status >= 300) return r;
            std::atomic_store(&e->snapshot, std::shared_ptr<const StudySession>(std::move(draft)));
        }
        persist();
        return r;
    }

    static AdjudicationResult adjudicate_payload(const json& body, const StudyId& study) {
        std::vector<CandidateTable> cands;
        if (body.is_array()) {
            for (const auto& c : body) cands.push_back(candidate_from_json(c, study));
        } else {
            cands.push_back(candidate_from_json(body, study));
        }
        if (cands.empty() || cands.size() > 2) throw InputError("risk_table: expected one or two candidate tables");
        if (cands.size() == 1) {
            AdjudicationResult res;
            res.table = cands[0].payload;
            res.report = validate_risk_table(res.table);
            return res;
        }
        // the primary extractor's table is primary regardless of order
        if (cands[1].source_tag == SourceTag::primary_extractor && cands[0].source_tag != SourceTag::primary_extractor)
            std::swap(cands[0], cands[1]);
        return adjudicate_tables(cands[0], cands[1]);
    }

    static void rematch(StudySession& s) {
        std::vector<std::string> traced;
        for (const auto& [label, st] : s.arms)
            if (st.curve) traced.push_back(label);
        s.mapping = {};
        if (!s.adjudication || traced.empty() || s.adjudication->table.arms.empty()) return;
        std::vector<std::string> table_labels;
        for (const auto& a : s.adjudication->table.arms) table_labels.push_back(a.arm_label);
        s.mapping = match_arms(traced, table_labels);
        for (auto& [label, st] : s.arms)
            if (st.curve && s.mapping.for_curve(label)) st.state = std::max(st.state, ArmState::matched);
    }

    static std::map<std::string, ValidationReport> arm_reports(const StudySession& s) {
        std::map<std::string, ValidationReport> out;
        for (const auto& [label, st] : s.arms) {
            ValidationReport rep = st.trace_report;
            const std::string where = s.study.rendered() + " / " + label;
            if (!st.curve) {
                rep.error("not_traced", where, "arm has no trace yet");
            } else if (!s.adjudication) {
                rep.error("no_risk_table", where, "study has no risk table yet");
            } else {
                try {
                    finalize_arm(*st.curve, s.mapping, s.adjudication->table);
                } catch (const ExportBlocked& e) {
                    rep.merge(e.report);
                }
            }
            out[label] = std::move(rep);
        }
        return out;
    }

public:
    static ArmState effective_state(const StudySession& s, const std::string& arm,
                                    const std::map<std::string, ValidationReport>& reports) {
        const auto& st = s.arms.at(arm);
        if (st.state == ArmState::matched && !reports.at(arm).has_errors() &&
            !(s.adjudication && s.adjudication->report.has_errors()))
            return ArmState::validated;
        return st.state;
    }

private:
    static json anchors_body(const StudySession& s) {
        json j = io::anchors_to_json(*s.anchors);
        j["calibrated_arms"] = json::array();
        for (const auto& [label, st] : s.arms) j["calibrated_arms"].push_back(label);
        return j;
    }

    static json trace_body(const StudySession& s, const std::string& arm) {
        const auto& st = s.arms.at(arm);
        json pts = json::array();
        for (const auto& p : st.curve->points) pts.push_back({p.time, p.survival * 100.0});
        return {{"arm", arm},
                {"state", to_string(st.state)},
                {"points", pts},
                {"findings", findings_to_json(st.trace_report)}};
    }

    static json risk_body(const StudySession& s) {
        json diffs = json::array();
        for (const auto& d : s.adjudication->diffs) diffs.push_back(io::cell_diff_to_json(d));
        json pairs = json::array();
        for (const auto& p : s.mapping.pairs)
            pairs.push_back({{"curve", p.curve_label}, {"table", p.table_label}, {"method", to_string(p.method)}});
        return {{"table", io::risk_table_to_json(s.adjudication->table)},
                {"diffs", diffs},
                {"findings", findings_to_json(s.adjudication->report)},
                {"mapping", pairs},
                {"unmatched_curves", s.mapping.unmatched_curves},
                {"ambiguous", s.mapping.ambiguous}};
    }

    static json export_body(const StudySession& s) {
        return {{"id", s.id},
                {"xy", "/studies/" + s.id + "/export/xy.csv"},
                {"risk_table", "/studies/" + s.id + "/export/risk_table.csv"}};
    }

    // --- persistence ---------------------------------------------------------

    static json session_to_json(const StudySession& s) {
        json figs = json::array();
        for (const auto& f : s.figures)
            figs.push_back({{"id", f.id}, {"content_type", f.content_type}, {"file", f.file}, {"bytes", f.bytes}});
        json arms = json::object();
        for (const auto& [label, st] : s.arms) {
            json px = json::array();
            for (const auto& p : st.pixels) px.push_back({p.u, p.v});
            arms[label] = {{"state", to_string(st.state)}, {"pixels", px}};
        }
        return {{"id", s.id},
                {"study_id", s.study.rendered()},
                {"figures", figs},
                {"anchors", s.anchors ? io::anchors_to_json(*s.anchors) : json(nullptr)},
                {"arms", arms},
                {"risk_payload", s.risk_payload},
                {"exported", s.exported}};
    }

    // Replays stored inputs through the same transforms used online.
    static StudySession session_from_json(const json& j) {
        StudySession s;
        s.id = j.at("id").get<std::string>();
        s.study = StudyId::parse(j.at("study_id").get<std::string>());
        for (const auto& f : j.at("figures"))
            s.figures.push_back({f.at("id").get<std::string>(), f.at("content_type").get<std::string>(),
                                 f.at("file").get<std::string>(), f.at("bytes").get<std::size_t>()});
        if (!j.at("anchors").is_null()) s.anchors = io::anchors_from_json(j.at("anchors"));
        for (const auto& [label, a] : j.at("arms").items()) {
            ArmSession st;
            auto state = parse_arm_state(a.at("state").get<std::string>());
            if (!state) throw SchemaError("workspace.json: unknown arm state for '" + label + "'");
            st.state = *state;
            for (const auto& p : a.at("pixels")) st.pixels.push_back({p[0].get<double>(), p[1].get<double>()});
            if (!st.pixels.empty() && s.anchors) {
                auto sc = standardize_curve(transform_trace(st.pixels, solve_affine(*s.anchors)), s.study, label);
                st.curve = std::move(sc.curve);
                st.trace_report = std::move(sc.report);
            }
            s.arms[label] = std::move(st);
        }
        s.risk_payload = j.at("risk_payload");
        if (!s.risk_payload.is_null()) s.adjudication = adjudicate_payload(s.risk_payload, s.study);
        rematch(s);
        for (auto& [label, st] : s.arms)
            if (j.at("arms").at(label).at("state") == "exported") st.state = ArmState::exported;
        s.exported = j.at("exported").get<bool>();
        if (s.exported) {
            std::string xy, risk;
            for (const auto& [label, st] : s.arms) {
                auto frag = finalize_arm(*st.curve, s.mapping, s.adjudication->table);
                xy += frag.xy_rows;
                risk += frag.risk_rows;
            }
            s.xy_csv = std::string(kSchemaTag) + "\n" + csv::header_line(io::kXyHeader) + xy;
            s.risk_csv = std::string(kSchemaTag) + "\n" + csv::header_line(io::kRiskHeader) + risk;
        }
        return s;
    }

    void persist() {
        std::lock_guard lock(persist_mutex_);
        json j = io::workspace_to_json(workspace());
        json sessions = json::array();
        for (const auto& snap : all_snapshots()) sessions.push_back(session_to_json(*snap));
        j["service"] = {{"next_id", counter_}, {"studies", sessions}};
        const auto tmp = dir_ / "workspace.json.tmp";
        io::write_text(tmp, j.dump(2) + "\n");
        fs::rename(tmp, dir_ / "workspace.json");
    }

    void load() {
        auto j = io::parse_json(io::read_text(dir_ / "workspace.json"), (dir_ / "workspace.json").string());
        io::workspace_from_json(j);  // schema check
        if (!j.contains("service")) return;
        counter_ = j.at("service").at("next_id").get<long>();
        for (const auto& sj : j.at("service").at("studies")) {
            auto e = std::make_shared<Entry>();
            e->snapshot = std::make_shared<const StudySession>(session_from_json(sj));
            by_id_[e->snapshot->id] = e;
            order_.push_back(std::move(e));
        }
    }
};

namespace detail {

inline json study_summary(const StudySession& s, const std::map<std::string, ValidationReport>* per_arm) {
    json arms = json::object();
    for (const auto& [label, st] : s.arms) {
        json a;
        a["state"] = per_arm ? to_string(Store::effective_state(s, label, *per_arm)) : to_string(st.state);
        if (per_arm) a["findings"] = findings_to_json(per_arm->at(label));
        if (const auto* p = s.mapping.for_curve(label)) a["matched_to"] = p->table_label;
        arms[label] = a;
    }
    json figs = json::array();
    for (const auto& f : s.figures) figs.push_back({{"id", f.id}, {"content_type", f.content_type}, {"bytes", f.bytes}});
    return {{"id", s.id},
            {"study_id", s.study.rendered()},
            {"figures", figs},
            {"calibrated", s.anchors.has_value()},
            {"has_risk_table", s.adjudication.has_value()},
            {"exported", s.exported},
            {"arms", arms}};
}

inline void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    if (r.content_type == "application/json") res.set_content(r.body.dump(), "application/json");
    else res.set_content(r.text, r.content_type.c_str());
}

// Maps exceptions to status codes: malformed requests 400, domain rejections 422.
template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        send(res, fn());
    } catch (const json::exception& e) {
        send(res, error_response(400, std::string("malformed request: ") + e.what()));
    } catch (const ParseError& e) {
        send(res, error_response(400, e.what()));
    } catch (const ExportBlocked& e) {
        send(res, error_response(422, e.what(), {{"findings", findings_to_json(e.report)}}));
    } catch (const Error& e) {
        send(res, error_response(422, e.what()));
    } catch (const std::exception& e) {
        send(res, error_response(500, e.what()));
    }
}

inline json body_json(const httplib::Request& req) { return json::parse(req.body); }

}  // namespace detail

// Routes (study ids are the short ids returned by POST /studies):
//   GET  /studies                              GET /studies/{id}
//   POST /studies                              POST /studies/{id}/figures
//   PUT  /studies/{id}/arms/{arm}/anchors      PUT /studies/{id}/arms/{arm}/trace
//   PUT  /studies/{id}/risk_table              PUT /studies/{id}/arms/{arm}/risk_table
//   GET  /studies/{id}/validation              GET /studies/{id}/arms/{arm}/validation
//   POST /studies/{id}/export                  GET /studies/{id}/export/{xy.csv|risk_table.csv}
inline void install(httplib::Server& srv, Store& store) {
    using detail::guarded;
    using Req = const httplib::Request&;
    using Res = httplib::Response&;
    srv.Get("/studies", [&store](Req, Res res) { guarded(res, [&] { return store.list_studies(); }); });
    srv.Post("/studies", [&store](Req req, Res res) { guarded(res, [&] { return store.create_study(detail::body_json(req)); }); });
    srv.Get(R"(/studies/([^/]+))", [&store](Req req, Res res) { guarded(res, [&] { return store.get_study(req.matches[1]); }); });
    srv.Post(R"(/studies/([^/]+)/figures)", [&store](Req req, Res res) {
        guarded(res, [&] {
            auto type = req.get_header_value("Content-Type");
            return store.upload_figure(req.matches[1], req.body, type.empty() ? "application/octet-stream" : type);
        });
    });
    srv.Put(R"(/studies/([^/]+)/arms/([^/]+)/anchors)", [&store](Req req, Res res) {
        guarded(res, [&] { return store.put_anchors(req.matches[1], req.matches[2], detail::body_json(req)); });
    });
    srv.Put(R"(/studies/([^/]+)/arms/([^/]+)/trace)", [&store](Req req, Res res) {
        guarded(res, [&] { return store.put_trace(req.matches[1], req.matches[2], detail::body_json(req)); });
    });
    srv.Put(R"(/studies/([^/]+)/risk_table)", [&store](Req req, Res res) {
        guarded(res, [&] { return store.put_risk_table(req.matches[1], detail::body_json(req)); });
    });
    srv.Put(R"(/studies/([^/]+)/arms/([^/]+)/risk_table)", [&store](Req req, Res res) {
        guarded(res, [&] { return store.put_risk_table(req.matches[1], detail::body_json(req)); });
    });
    srv.Get(R"(/studies/([^/]+)/validation)", [&store](Req req, Res res) { guarded(res, [&] { return store.get_validation(req.matches[1]); }); });
    srv.Get(R"(/studies/([^/]+)/arms/([^/]+)/validation)", [&store](Req req, Res res) {
        guarded(res, [&] { return store.get_validation(req.matches[1]); });
    });
    srv.Post(R"(/studies/([^/]+)/export)", [&store](Req req, Res res) { guarded(res, [&] { return store.post_export(req.matches[1]); }); });
    srv.Get(R"(/studies/([^/]+)/export/([^/]+))", [&store](Req req, Res res) {
        guarded(res, [&] { return store.get_export(req.matches[1], req.matches[2]); });
    });
}

}  // namespace kmlead::service
