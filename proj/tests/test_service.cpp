#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include <httplib.h>

#include "kmlead/service.hpp"
#include "support.hpp"

using namespace kmlead;
using nlohmann::json;

namespace {

// Synthetic figure: x axis 0..24 months over u in [80, 680], y axis 0..100 %
// over v in [520, 40].
constexpr double kU0 = 80, kU1 = 680, kV0 = 520, kV1 = 40, kMaxMonths = 24;

double true_survival_pct(double t) { return 100.0 * std::exp(-std::pow(t / 14.0, 1.1)); }

json anchors_payload() { return {{"origin", {kU0, kV0}}, {"xmax", {kU1, kV0, kMaxMonths}}, {"ytop", {kU0, kV1}}}; }

// Clicks along the true curve, snapped to half pixels like a UI would report.
json trace_payload(const std::string& study, const std::string& arm, double scale = 1.0) {
    json px = json::array();
    for (int i = 0; i <= 96; ++i) {
        double t = kMaxMonths * i / 96.0;
        double u = kU0 + t / kMaxMonths * (kU1 - kU0);
        double v = kV0 - scale * true_survival_pct(t) / 100.0 * (kV0 - kV1);
        px.push_back({std::round(u * 2) / 2, std::round(v * 2) / 2});
    }
    return {{"study_id", study}, {"arm", arm}, {"pixels", px}};
}

json table(const std::vector<std::pair<std::string, std::vector<long>>>& arms) {
    json a = json::array();
    for (const auto& [label, counts] : arms) a.push_back({{"arm", label}, {"counts", counts}});
    return {{"time_grid", {0, 3, 6, 9, 12, 15, 18, 21, 24}}, {"arms", a}};
}

const std::vector<long> kCounts{300, 262, 228, 196, 167, 140, 118, 98, 80};

class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = testsupport::temp_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
        start();
    }

    void TearDown() override { stop(); }

    void start() {
        store_ = std::make_unique<service::Store>(dir_);
        server_ = std::make_unique<httplib::Server>();
        service::install(*server_, *store_);
        port_ = server_->bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_->listen_after_bind(); });
        server_->wait_until_ready();
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    }

    void stop() {
        server_->stop();
        thread_.join();
        client_.reset();
        server_.reset();
        store_.reset();
    }

    httplib::Result put(const std::string& path, const json& body) { return client_->Put(path, body.dump(), "application/json"); }
    httplib::Result post(const std::string& path, const json& body) { return client_->Post(path, body.dump(), "application/json"); }

    std::string create(const std::string& study_id) {
        auto r = post("/studies", {{"study_id", study_id}});
        EXPECT_TRUE(r && (r->status == 201 || r->status == 200));
        return json::parse(r->body).at("id").get<std::string>();
    }

    void upload(const std::string& id, const std::string& bytes = "\x89PNG fake figure bytes") {
        auto r = client_->Post("/studies/" + id + "/figures", bytes, "image/png");
        ASSERT_TRUE(r);
        ASSERT_TRUE(r->status == 201 || r->status == 200) << r->body;
    }

    std::string read_workspace() const { return io::read_text(dir_ / "workspace.json"); }

    std::filesystem::path dir_;
    std::unique_ptr<service::Store> store_;
    std::unique_ptr<httplib::Server> server_;
    std::unique_ptr<httplib::Client> client_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace

TEST_F(ServiceTest, AnchorsTraceExportRoundTrip) {
    auto id = create("Synthetic-1 (Fig 2A)");
    upload(id);
    auto r = put("/studies/" + id + "/arms/Drug%20A/anchors", anchors_payload());
    ASSERT_EQ(r->status, 200) << r->body;
    r = put("/studies/" + id + "/arms/Drug%20A/trace", trace_payload("Synthetic-1 (Fig 2A)", "Drug A"));
    ASSERT_EQ(r->status, 200) << r->body;
    EXPECT_EQ(json::parse(r->body)["state"], "traced");
    r = put("/studies/" + id + "/risk_table", {{"source", "manual"}, {"table", table({{"Drug A", kCounts}})}});
    ASSERT_EQ(r->status, 200) << r->body;

    auto v = client_->Get("/studies/" + id + "/validation");
    ASSERT_EQ(v->status, 200);
    auto vj = json::parse(v->body);
    EXPECT_TRUE(vj["ok"].get<bool>()) << v->body;
    EXPECT_EQ(vj["arms"]["Drug A"]["state"], "validated");

    r = post("/studies/" + id + "/export", json::object());
    ASSERT_EQ(r->status, 200) << r->body;
    auto xy = client_->Get("/studies/" + id + "/export/xy.csv");
    ASSERT_EQ(xy->status, 200);
    auto curves = io::parse_xy(xy->body);
    ASSERT_EQ(curves.size(), 1u);
    EXPECT_EQ(curves[0].study.rendered(), "Synthetic-1 (Fig 2A)");
    EXPECT_EQ(curves[0].arm_label, "Drug A");
    auto rep = validate_curve(curves[0]);
    EXPECT_FALSE(rep.has_errors()) << rep.to_text();
    EXPECT_EQ(curves[0].points.size(), kCurvePoints);
    // half-pixel snapping moves survival by at most 0.25 px * 100/480 %; the
    // chord between clicks 0.25 months apart adds less than 0.1 %
    for (const auto& p : curves[0].points) EXPECT_NEAR(p.survival * 100.0, true_survival_pct(p.time), 0.2) << p.time;

    auto risk = client_->Get("/studies/" + id + "/export/risk_table.csv");
    ASSERT_EQ(risk->status, 200);
    auto tables = io::parse_risk(risk->body);
    ASSERT_EQ(tables.size(), 1u);
    EXPECT_EQ(tables[0].arms[0].counts, kCounts);
    EXPECT_FALSE(validate_bundle(curves, tables).has_errors());
}

TEST_F(ServiceTest, ExportBeforeCalibrationIsConflict) {
    auto id = create("Synthetic-2");
    auto r = post("/studies/" + id + "/export", json::object());
    EXPECT_EQ(r->status, 409);
    upload(id);
    r = post("/studies/" + id + "/export", json::object());
    EXPECT_EQ(r->status, 409);
    EXPECT_EQ(client_->Get("/studies/" + id + "/export/xy.csv")->status, 409);
}

TEST_F(ServiceTest, StagesCannotBeSkipped) {
    auto id = create("Synthetic-3");
    EXPECT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 409);  // no figure
    EXPECT_EQ(put("/studies/" + id + "/risk_table", {{"table", table({{"A", kCounts}})}})->status, 409);
    upload(id);
    EXPECT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Synthetic-3", "A"))->status, 409);  // no anchors
    ASSERT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Synthetic-3", "A"))->status, 200);
    // traced but unmatched: export refused
    EXPECT_EQ(post("/studies/" + id + "/export", json::object())->status, 409);
    // recalibrating after a trace would silently move traced points
    auto moved = anchors_payload();
    moved["origin"] = {kU0 + 5, kV0};
    EXPECT_EQ(put("/studies/" + id + "/arms/A/anchors", moved)->status, 409);
}

TEST_F(ServiceTest, UnknownIdsAre404) {
    EXPECT_EQ(client_->Get("/studies/s99")->status, 404);
    EXPECT_EQ(client_->Get("/studies/s99/validation")->status, 404);
    EXPECT_EQ(put("/studies/s99/arms/A/anchors", anchors_payload())->status, 404);
    EXPECT_EQ(post("/studies/s99/export", json::object())->status, 404);
    EXPECT_EQ(client_->Get("/studies/s99/export/xy.csv")->status, 404);
    auto id = create("Synthetic-4");
    EXPECT_EQ(client_->Get("/studies/" + id + "/export/other.csv")->status, 404);
}

TEST_F(ServiceTest, TwoCandidatesWithOneMinorDiscrepancy) {
    auto id = create("Synthetic-5");
    upload(id);
    auto fallback_counts = kCounts;
    fallback_counts[4] += 1;
    json body = json::array({{{"source", "fallback_extractor"}, {"confidence", 0.7}, {"table", table({{"A", fallback_counts}})}},
                             {{"source", "primary_extractor"}, {"confidence", 0.9}, {"table", table({{"A", kCounts}})}}});
    auto r = put("/studies/" + id + "/risk_table", body);
    ASSERT_EQ(r->status, 200) << r->body;
    auto j = json::parse(r->body);
    ASSERT_EQ(j["diffs"].size(), 1u);
    EXPECT_EQ(j["diffs"][0]["index"], 4);
    EXPECT_EQ(j["diffs"][0]["primary"], kCounts[4]);
    EXPECT_EQ(j["diffs"][0]["fallback"], kCounts[4] + 1);
    EXPECT_EQ(j["diffs"][0]["resolution"], "primary");
    EXPECT_EQ(j["table"]["arms"][0]["counts"], kCounts);
    EXPECT_TRUE(j["findings"].empty());
}

TEST_F(ServiceTest, LargeDiscrepancyTakesFallbackAndBothNonMonotoneBlocksExport) {
    auto id = create("Synthetic-6");
    upload(id);
    auto big = kCounts;
    big[2] += 5;
    auto r = put("/studies/" + id + "/risk_table",
                 json::array({{{"source", "primary_extractor"}, {"table", table({{"A", big}})}},
                              {{"source", "fallback_extractor"}, {"table", table({{"A", kCounts}})}}}));
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(json::parse(r->body)["table"]["arms"][0]["counts"], kCounts);

    auto bad_a = kCounts, bad_b = kCounts;
    bad_a[5] = 200;
    bad_b[5] = 210;
    r = put("/studies/" + id + "/risk_table",
            json::array({{{"source", "primary_extractor"}, {"table", table({{"A", bad_a}})}},
                         {{"source", "fallback_extractor"}, {"table", table({{"A", bad_b}})}}}));
    ASSERT_EQ(r->status, 200);
    EXPECT_FALSE(json::parse(r->body)["findings"].empty());
    ASSERT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Synthetic-6", "A"))->status, 200);
    auto v = json::parse(client_->Get("/studies/" + id + "/validation")->body);
    EXPECT_FALSE(v["ok"].get<bool>());
    auto ex = post("/studies/" + id + "/export", json::object());
    EXPECT_EQ(ex->status, 422);
    EXPECT_NE(ex->body.find("unresolved_conflict"), std::string::npos);
}

TEST_F(ServiceTest, StructuralMismatchIsUnprocessable) {
    auto id = create("Synthetic-7");
    upload(id);
    json a = table({{"A", kCounts}});
    json b = table({{"A", kCounts}, {"B", kCounts}});
    auto r = put("/studies/" + id + "/risk_table",
                 json::array({{{"source", "primary_extractor"}, {"table", a}}, {{"source", "fallback_extractor"}, {"table", b}}}));
    EXPECT_EQ(r->status, 422);
    EXPECT_EQ(put("/studies/" + id + "/risk_table", json::array())->status, 422);
    EXPECT_EQ(put("/studies/" + id + "/risk_table", {{"source", "ocr"}, {"table", a}})->status, 422);
}

TEST_F(ServiceTest, TerminalMonthMismatchBlocksExport) {
    auto id = create("Synthetic-8");
    upload(id);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Synthetic-8", "A"))->status, 200);
    json t = {{"time_grid", {0, 6, 12, 18, 24, 30, 36, 42}}, {"arms", {{{"arm", "A"}, {"counts", {300, 228, 167, 118, 80, 50, 30, 10}}}}}};
    ASSERT_EQ(put("/studies/" + id + "/risk_table", {{"table", t}})->status, 200);
    auto ex = post("/studies/" + id + "/export", json::object());
    EXPECT_EQ(ex->status, 422);
    EXPECT_NE(ex->body.find("terminal_month"), std::string::npos);
    EXPECT_EQ(client_->Get("/studies/" + id + "/export/xy.csv")->status, 409);
}

TEST_F(ServiceTest, ArmsMatchByNormalizedLabel) {
    auto id = create("Synthetic-9");
    upload(id);
    ASSERT_EQ(put("/studies/" + id + "/arms/NIVO%2BIPI/anchors", anchors_payload())->status, 200);
    auto r = put("/studies/" + id + "/arms/NIVO%2BIPI/trace", trace_payload("Synthetic-9", "NIVO+IPI"));
    ASSERT_EQ(r->status, 200) << r->body;
    r = put("/studies/" + id + "/risk_table", {{"table", table({{"nivo + ipi", kCounts}})}});
    ASSERT_EQ(r->status, 200);
    auto j = json::parse(r->body);
    ASSERT_EQ(j["mapping"].size(), 1u);
    EXPECT_EQ(j["mapping"][0]["curve"], "NIVO+IPI");
    EXPECT_EQ(j["mapping"][0]["method"], "exact");
    ASSERT_EQ(post("/studies/" + id + "/export", json::object())->status, 200);
    auto risk = io::parse_risk(client_->Get("/studies/" + id + "/export/risk_table.csv")->body);
    EXPECT_EQ(risk[0].arms[0].arm_label, "NIVO+IPI");  // curve label kept verbatim
}

TEST_F(ServiceTest, IdenticalRepeatsAreIdempotent) {
    auto r1 = post("/studies", {{"study_id", "Synthetic-10"}});
    auto r2 = post("/studies", {{"study_id", "Synthetic-10"}});
    EXPECT_EQ(r1->status, 201);
    EXPECT_EQ(r2->status, 200);
    EXPECT_EQ(json::parse(r1->body)["id"], json::parse(r2->body)["id"]);
    auto id = json::parse(r1->body)["id"].get<std::string>();
    upload(id);
    auto f1 = client_->Post("/studies/" + id + "/figures", "\x89PNG fake figure bytes", "image/png");
    EXPECT_EQ(f1->status, 200);
    EXPECT_EQ(json::parse(f1->body)["figure_id"], "f1");

    auto path = "/studies/" + id + "/arms/A/";
    ASSERT_EQ(put(path + "anchors", anchors_payload())->status, 200);
    ASSERT_EQ(put(path + "trace", trace_payload("Synthetic-10", "A"))->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/risk_table", {{"table", table({{"A", kCounts}})}})->status, 200);
    ASSERT_EQ(post("/studies/" + id + "/export", json::object())->status, 200);
    const auto before = read_workspace();
    const auto export_before = client_->Get("/studies/" + id + "/export/xy.csv")->body;

    EXPECT_EQ(put(path + "anchors", anchors_payload())->status, 200);
    EXPECT_EQ(put(path + "trace", trace_payload("Synthetic-10", "A"))->status, 200);
    EXPECT_EQ(put("/studies/" + id + "/risk_table", {{"table", table({{"A", kCounts}})}})->status, 200);
    EXPECT_EQ(post("/studies/" + id + "/export", json::object())->status, 200);
    EXPECT_EQ(read_workspace(), before);
    EXPECT_EQ(client_->Get("/studies/" + id + "/export/xy.csv")->body, export_before);

    // a different payload after export is a state-order violation
    EXPECT_EQ(put(path + "trace", trace_payload("Synthetic-10", "A", 0.9))->status, 409);
    EXPECT_EQ(read_workspace(), before);
}

TEST_F(ServiceTest, ReadsHaveNoSideEffects) {
    auto id = create("Synthetic-11");
    upload(id);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 200);
    const auto before = read_workspace();
    const auto mtime = std::filesystem::last_write_time(dir_ / "workspace.json");
    for (const char* p : {"/studies", "/studies/s1", "/studies/s1/validation", "/studies/s1/arms/A/validation",
                          "/studies/s1/export/xy.csv"})
        client_->Get(p);
    EXPECT_EQ(read_workspace(), before);
    EXPECT_EQ(std::filesystem::last_write_time(dir_ / "workspace.json"), mtime);
}

TEST_F(ServiceTest, MalformedRequests) {
    auto id = create("Synthetic-12");
    upload(id);
    EXPECT_EQ(client_->Put("/studies/" + id + "/arms/A/anchors", "{not json", "application/json")->status, 400);
    EXPECT_EQ(put("/studies/" + id + "/arms/A/anchors", {{"origin", {1, 2}}})->status, 400);
    json collinear = {{"origin", {0, 0}}, {"xmax", {100, 0, 24}}, {"ytop", {200, 0}}};
    EXPECT_EQ(put("/studies/" + id + "/arms/A/anchors", collinear)->status, 422);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 200);
    EXPECT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Synthetic-12", "B"))->status, 400);
    EXPECT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Other", "A"))->status, 400);
    EXPECT_EQ(put("/studies/" + id + "/arms/A/trace", {{"pixels", json::array()}})->status, 422);
    EXPECT_EQ(client_->Post("/studies/" + id + "/figures", "", "image/png")->status, 400);
}

TEST_F(ServiceTest, SessionSurvivesRestart) {
    auto id = create("Synthetic-13 (Fig 1B)");
    upload(id);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/anchors", anchors_payload())->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/arms/A/trace", trace_payload("Synthetic-13 (Fig 1B)", "A"))->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/arms/B/anchors", anchors_payload())->status, 200);
    ASSERT_EQ(put("/studies/" + id + "/arms/B/trace", trace_payload("Synthetic-13 (Fig 1B)", "B", 0.8))->status, 200);
    auto fb = kCounts;
    fb[3] -= 1;
    ASSERT_EQ(put("/studies/" + id + "/risk_table",
                  json::array({{{"source", "primary_extractor"}, {"table", table({{"A", kCounts}, {"B", kCounts}})}},
                               {{"source", "fallback_extractor"}, {"table", table({{"A", fb}, {"B", kCounts}})}}}))
                  ->status,
              200);
    ASSERT_EQ(post("/studies/" + id + "/export", json::object())->status, 200);
    const auto study = client_->Get("/studies/" + id)->body;
    const auto xy = client_->Get("/studies/" + id + "/export/xy.csv")->body;

    stop();
    start();
    EXPECT_EQ(client_->Get("/studies/" + id)->body, study);
    EXPECT_EQ(client_->Get("/studies/" + id + "/export/xy.csv")->body, xy);
    EXPECT_EQ(create("Synthetic-14"), "s2");

    // the file is a regular workspace as far as the CLI formats are concerned
    auto ws = io::read_workspace(dir_ / "workspace.json");
    EXPECT_EQ(ws.curves.size(), 2u);
    ASSERT_EQ(ws.risk_tables.size(), 1u);
    EXPECT_EQ(ws.adjudication_logs.at("Synthetic-13 (Fig 1B)").size(), 1u);
    EXPECT_EQ(ws.anchors.size(), 2u);
}

TEST_F(ServiceTest, ConcurrentStudiesDoNotInterfere) {
    constexpr int kStudies = 6;
    std::vector<std::string> ids;
    for (int i = 0; i < kStudies; ++i) ids.push_back(create("Parallel-" + std::to_string(i)));
    std::vector<std::thread> workers;
    std::vector<int> final_status(kStudies, 0);
    for (int i = 0; i < kStudies; ++i) {
        workers.emplace_back([&, i] {
            httplib::Client c("127.0.0.1", port_);
            const auto& id = ids[static_cast<std::size_t>(i)];
            auto js = [](const json& j) { return j.dump(); };
            c.Post("/studies/" + id + "/figures", "figure " + std::to_string(i), "image/png");
            c.Put("/studies/" + id + "/arms/A/anchors", js(anchors_payload()), "application/json");
            for (int rep = 0; rep < 3; ++rep) {
                c.Put("/studies/" + id + "/arms/A/trace", js(trace_payload("Parallel-" + std::to_string(i), "A")), "application/json");
                c.Get("/studies/" + id + "/validation");
            }
            c.Put("/studies/" + id + "/risk_table", js({{"table", table({{"A", kCounts}})}}), "application/json");
            auto r = c.Post("/studies/" + id + "/export", "{}", "application/json");
            final_status[static_cast<std::size_t>(i)] = r ? r->status : -1;
        });
    }
    // concurrent identical writes to one study serialize to one outcome
    std::vector<int> same(4, 0);
    auto shared = create("Shared");
    upload(shared);
    for (int k = 0; k < 4; ++k)
        workers.emplace_back([&, k] {
            httplib::Client c("127.0.0.1", port_);
            auto r = c.Put("/studies/" + shared + "/arms/A/anchors", anchors_payload().dump(), "application/json");
            same[static_cast<std::size_t>(k)] = r ? r->status : -1;
        });
    for (auto& w : workers) w.join();
    for (int s : final_status) EXPECT_EQ(s, 200);
    for (int s : same) EXPECT_EQ(s, 200);
    auto list = json::parse(client_->Get("/studies")->body);
    EXPECT_EQ(list.size(), static_cast<std::size_t>(kStudies + 1));
    auto ws = io::read_workspace(dir_ / "workspace.json");
    EXPECT_EQ(ws.curves.size(), static_cast<std::size_t>(kStudies));
}
