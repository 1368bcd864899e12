#include <gtest/gtest.h>

#include "kmlead/reconstructor.hpp"
#include "support.hpp"

using namespace kmlead;

namespace {

KMCurve flat_curve(double t_end) {
    std::vector<DataPoint> pts{{0, 100}, {t_end, 100}};
    return standardize_curve(pts, StudyId{"S", std::nullopt}, "A").curve;
}

double sup_distance(const KMCurve& curve, const ReconstructedIPD& ipd) {
    auto km = km_estimator(ipd);
    double sup = 0.0;
    for (const auto& p : curve.points) sup = std::max(sup, std::abs(km.at(p.time) - p.survival));
    return sup;
}

}  // namespace

TEST(KmEstimator, HandExample) {
    ReconstructedIPD ipd{{}, "a", {{3, 1}, {5, 0}, {7, 1}}};
    auto km = km_estimator(ipd);
    EXPECT_DOUBLE_EQ(km.at(2.9), 1.0);
    EXPECT_DOUBLE_EQ(km.at(3.0), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(km.at(6.9), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(km.at(7.0), 0.0);
}

TEST(KmEstimator, AllCensoredAndSingleEvent) {
    ReconstructedIPD cens{{}, "a", {{1, 0}, {2, 0}}};
    EXPECT_DOUBLE_EQ(km_estimator(cens).at(100), 1.0);
    ReconstructedIPD one{{}, "a", {{4, 1}}};
    EXPECT_DOUBLE_EQ(km_estimator(one).at(3.99), 1.0);
    EXPECT_DOUBLE_EQ(km_estimator(one).at(4), 0.0);
}

TEST(KmEstimator, CensoredAtEventTimeStaysAtRisk) {
    ReconstructedIPD ipd{{}, "a", {{2, 1}, {2, 0}}};
    EXPECT_DOUBLE_EQ(km_estimator(ipd).at(2), 0.5);
}

TEST(Reconstruct, FlatCurveNoEvents) {
    auto curve = flat_curve(12);
    auto ipd = reconstruct_ipd(curve, {0, 6, 12}, {50, 48, 45});
    ASSERT_EQ(ipd.n(), 50u);
    for (const auto& r : ipd.records) EXPECT_EQ(r.event, 0);
    EXPECT_EQ(number_at_risk(ipd, 6), 48);
    EXPECT_EQ(number_at_risk(ipd, 12), 45);
    for (const auto& r : ipd.records) EXPECT_GT(r.time, 0.0);
}

TEST(Reconstruct, SingleIntervalToy) {
    std::vector<DataPoint> pts{{0, 100}, {2, 100}, {2.0000001, 50}, {4, 50}};
    auto curve = standardize_curve(pts, StudyId{"S", std::nullopt}, "A").curve;
    auto ipd = reconstruct_ipd(curve, {0, 4}, {4, 2});
    ASSERT_EQ(ipd.n(), 4u);
    long events_in = 0, cens_in = 0;
    for (const auto& r : ipd.records) {
        if (r.time < 4) (r.event ? events_in : cens_in) += 1;
    }
    EXPECT_EQ(events_in, 2);
    EXPECT_EQ(cens_in, 0);
    EXPECT_EQ(number_at_risk(ipd, 4), 2);
}

TEST(Reconstruct, InfeasibleIntervalIsNamed) {
    std::vector<DataPoint> pts{{0, 100}, {5, 20}, {12, 20}};
    auto curve = standardize_curve(pts, StudyId{"S", std::nullopt}, "A").curve;
    try {
        reconstruct_ipd(curve, {0, 6, 12}, {100, 95, 90});
        FAIL() << "expected ReconstructionError";
    } catch (const ReconstructionError& e) {
        EXPECT_NE(std::string(e.what()).find("[0, 6)"), std::string::npos) << e.what();
    }
}

TEST(Reconstruct, ExponentialArmWithUniformCensoring) {
    std::mt19937_64 rng(20240611);
    std::exponential_distribution<double> ev(0.05);
    std::uniform_real_distribution<double> cen(0.0, 60.0);
    ReconstructedIPD truth{StudyId{"SIM", std::nullopt}, "exp", {}};
    for (int i = 0; i < 300; ++i) {
        double t = ev(rng), c = cen(rng);
        truth.records.push_back({std::min(t, c), t <= c ? 1 : 0});
    }
    double t_end = 0;
    for (const auto& r : truth.records) t_end = std::max(t_end, r.time);
    auto curve = testsupport::curve_from_km(km_estimator(truth), t_end, truth.study, truth.arm_label);
    std::vector<double> grid;
    std::vector<long> counts;
    for (double g = 0; g <= t_end; g += 6) {
        grid.push_back(g);
        counts.push_back(number_at_risk(truth, g));
    }
    auto ipd = reconstruct_ipd(curve, grid, counts);
    EXPECT_EQ(ipd.n(), 300u);
    EXPECT_LT(sup_distance(curve, ipd), 0.02);
    for (std::size_t j = 0; j < grid.size(); ++j) EXPECT_EQ(number_at_risk(ipd, grid[j]), counts[j]);
}

class RoundTrip : public ::testing::TestWithParam<std::tuple<long, double, double>> {};

TEST_P(RoundTrip, SupNormAndExactAtRisk) {
    auto [n, cens, shape] = GetParam();
    auto seed = static_cast<std::uint64_t>(n * 1000 + static_cast<long>(cens * 100) * 10 + static_cast<long>(shape * 10));
    auto arm = testsupport::simulate_arm(n, cens, shape, seed);
    auto ipd = reconstruct_ipd(arm.curve, arm.grid, arm.counts);
    EXPECT_EQ(static_cast<long>(ipd.n()), n);
    EXPECT_LE(sup_distance(arm.curve, ipd), 0.02);
    for (std::size_t j = 0; j < arm.grid.size(); ++j) EXPECT_EQ(number_at_risk(ipd, arm.grid[j]), arm.counts[j]) << "t=" << arm.grid[j];
}

INSTANTIATE_TEST_SUITE_P(Grid27, RoundTrip,
                         ::testing::Combine(::testing::Values(50L, 150L, 300L), ::testing::Values(0.1, 0.3, 0.5),
                                            ::testing::Values(0.8, 1.0, 1.5)));

TEST(ChooseGrid, PicksFinest) {
    RiskTable a{{"A", std::nullopt}, {}, {{"x", {}}}};
    RiskTable b{{"B", std::nullopt}, {}, {{"x", {}}}};
    for (double t = 0; t <= 60; t += 6) a.time_grid.push_back(t);
    for (double t = 0; t <= 72; t += 3) b.time_grid.push_back(t);
    auto g = choose_grid({a, b});
    ASSERT_EQ(g.K(), 24u);
    EXPECT_EQ(g.times.front(), 3);
    EXPECT_EQ(g.times.back(), 72);
    EXPECT_EQ(choose_grid({a}).times.back(), 60);
    EXPECT_EQ(choose_grid({a}).K(), 10u);
}

TEST(ChooseGrid, ExtendsFinestGrid) {
    RiskTable a{{"A", std::nullopt}, {}, {}};
    RiskTable b{{"B", std::nullopt}, {}, {}};
    for (double t = 0; t <= 60; t += 3) a.time_grid.push_back(t);
    for (double t = 0; t <= 72; t += 12) b.time_grid.push_back(t);
    auto g = choose_grid({a, b});
    ASSERT_EQ(g.K(), 24u);
    for (std::size_t k = 0; k < g.K(); ++k) EXPECT_DOUBLE_EQ(g.times[k], 3.0 * static_cast<double>(k + 1));
    EXPECT_THROW(choose_grid({}), InputError);
}

TEST(Discretize, RoundsUpAndTruncates) {
    TimeGrid g{{3, 6, 9}};
    ReconstructedIPD ipd{{}, "a", {{4.2, 1}, {6, 1}, {75, 1}, {0.5, 0}}};
    auto d = discretize(ipd, g);
    EXPECT_EQ(d.records[0].time, 6);
    EXPECT_EQ(d.records[0].event, 1);
    EXPECT_EQ(d.records[1].time, 6);
    EXPECT_EQ(d.records[2].time, 9);
    EXPECT_EQ(d.records[2].event, 0);
    EXPECT_EQ(d.records[3].time, 3);
    EXPECT_EQ(discretize(d, g), d);
}

TEST(Tabulate, HandCount) {
    TimeGrid g{{3, 6}};
    ReconstructedIPD ipd{{}, "a", {{3, 1}, {3, 0}, {6, 1}}};
    auto et = tabulate_events(ipd, g);
    EXPECT_EQ(et.r, (std::vector<long>{3, 1}));
    EXPECT_EQ(et.d, (std::vector<long>{1, 1}));
}

TEST(Tabulate, AllEventsAtFirstTimeAndMassConservation) {
    TimeGrid g{{3, 6, 9}};
    ReconstructedIPD ipd{{}, "a", {{3, 1}, {3, 1}, {3, 1}}};
    auto et = tabulate_events(ipd, g);
    EXPECT_EQ(et.r, (std::vector<long>{3, 0, 0}));
    EXPECT_EQ(et.d, (std::vector<long>{3, 0, 0}));

    auto arm = testsupport::simulate_arm(150, 0.3, 1.0, 99);
    auto disc = discretize(arm.truth, TimeGrid{{6, 12, 18, 24, 30, 36, 42, 48, 54, 60, 66, 72}});
    auto t2 = tabulate_events(disc, TimeGrid{{6, 12, 18, 24, 30, 36, 42, 48, 54, 60, 66, 72}});
    for (std::size_t k = 0; k + 1 < t2.K(); ++k) {
        long censored_at_k = 0;
        for (const auto& r : disc.records)
            if (r.time == 6.0 * static_cast<double>(k + 1) && !r.event) ++censored_at_k;
        EXPECT_EQ(t2.r[k + 1], t2.r[k] - t2.d[k] - censored_at_k);
    }
    EXPECT_THROW(tabulate_events(ReconstructedIPD{{}, "a", {{4, 1}}}, TimeGrid{{3, 6}}), Error);
}
