#include <gtest/gtest.h>

#include "kmlead/projection.hpp"
#include "support.hpp"

using namespace kmlead;
using testsupport::even_grid;

namespace {

// Every draw moved later by one grid step: b(t) = a(t - step), b = 1 on the first step.
PredictiveEnsemble shift_one_step(const PredictiveEnsemble& a) {
    PredictiveEnsemble b = a;
    for (auto& c : b.curves) {
        for (std::size_t k = c.size(); k-- > 1;) c[k] = c[k - 1];
        c[0] = 1.0;
    }
    return b;
}

PredictiveEnsemble with_curves(const TimeGrid& grid, std::vector<std::vector<double>> curves) {
    PredictiveEnsemble ens{grid, std::move(curves), {}};
    ens.hazards.assign(ens.M(), std::vector<double>(grid.K(), 0.0));
    return ens;
}

}  // namespace

TEST(MedianOs, HandInterpolation) {
    TimeGrid grid{{6, 12}};
    EXPECT_DOUBLE_EQ(*median_os(grid, {0.8, 0.4}), 10.5);
    EXPECT_FALSE(median_os(grid, {0.8, 0.6}).has_value());
    EXPECT_DOUBLE_EQ(*median_os(TimeGrid{{6, 12, 18}}, {0.7, 0.5, 0.3}), 12.0);
    EXPECT_DOUBLE_EQ(*median_os(TimeGrid{{4}}, {0.0}), 2.0);
}

TEST(MedianOs, MonotoneUnderDomination) {
    auto grid = even_grid(3, 72);
    auto ens = bsp_draws({0.04, 1.3, 20.0}, grid, 300, 1);
    for (const auto& lower : ens.curves) {
        auto upper = lower;
        for (auto& s : upper) s = std::min(1.0, s * 1.1);
        auto ml = median_os(grid, lower), mu = median_os(grid, upper);
        if (ml && mu) {
            EXPECT_GE(*mu, *ml);
        }
        if (!ml) {
            EXPECT_FALSE(mu.has_value());
        }
    }
}

TEST(Summarize, DegenerateEnsembleHasZeroWidth) {
    TimeGrid grid{{6, 12, 18}};
    auto ens = with_curves(grid, {{0.9, 0.7, 0.5}, {0.9, 0.7, 0.5}, {0.9, 0.7, 0.5}});
    auto s = summarize(ens, {6, 9, 18});
    EXPECT_DOUBLE_EQ(s.estimate[0], 0.9);
    EXPECT_DOUBLE_EQ(s.estimate[1], 0.8);
    EXPECT_DOUBLE_EQ(s.estimate[2], 0.5);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(s.lower[i], s.estimate[i]);
        EXPECT_DOUBLE_EQ(s.upper[i], s.estimate[i]);
    }
}

TEST(Summarize, PercentileSandwichOnRandomEnsembles) {
    auto grid = even_grid(3, 72);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto ens = bsp_draws({0.02 + 0.01 * static_cast<double>(seed), 1.2, 5.0 + 10.0 * static_cast<double>(seed)}, grid, 400, seed);
        auto s = summarize(ens, {12, 24, 36, 48, 60, 72});
        for (std::size_t i = 0; i < s.times.size(); ++i) {
            // the mean can exceed the 97.5% point when nearly every draw is ~0
            EXPECT_LE(s.lower[i], s.estimate[i]);
            EXPECT_LE(s.lower[i], s.upper[i]);
            EXPECT_GE(s.lower[i], 0.0);
            EXPECT_LE(s.upper[i], 1.0);
        }
    }
}

TEST(Summarize, InvariantToDrawOrder) {
    auto grid = even_grid(6, 48);
    auto ens = bsp_draws({0.04, 1.3, 15.0}, grid, 101, 2);
    auto rev = ens;
    std::reverse(rev.curves.begin(), rev.curves.end());
    auto a = summarize(ens, {12, 24, 30});
    auto b = summarize(rev, {12, 24, 30});
    EXPECT_EQ(a.lower, b.lower);
    EXPECT_EQ(a.upper, b.upper);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.estimate[i], b.estimate[i], 1e-15);
}

TEST(Summarize, TimeBeyondGridThrows) {
    auto ens = with_curves(TimeGrid{{6, 12}}, {{0.9, 0.8}});
    EXPECT_THROW(summarize(ens, {13}), InputError);
    EXPECT_THROW(summarize(PredictiveEnsemble{TimeGrid{{6}}, {}, {}}, {3}), InputError);
}

TEST(Summarize, TableLayout) {
    auto grid = even_grid(3, 72);
    auto ens = bsp_draws({0.04, 1.3, 20.0}, grid, 100, 3);
    std::vector<double> times{12, 24, 36, 48, 60, 72};
    auto text = format_os_table({{"mono-ICI", summarize(ens, times)}, {"dual-ICI", summarize(ens, times)}});
    EXPECT_EQ(text.rfind("# km-lead v1\nclass,time_months,estimate,ci_2.5,ci_97.5\n", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2 + 12);
}

TEST(Compare, ShiftOracle) {
    auto grid = even_grid(3, 72);
    auto a = bsp_draws({0.04, 1.3, 30.0}, grid, 2000, 4);
    auto b = shift_one_step(a);
    auto cmp = compare(a, b, 3.0, {12, 24});
    ASSERT_GT(cmp.pairs - cmp.excluded_pairs, 0u);
    EXPECT_NEAR(cmp.delta_median.estimate, 3.0, 1e-9);
    EXPECT_NEAR(cmp.delta_median.lower, 3.0, 1e-9);
    EXPECT_NEAR(cmp.delta_median.upper, 3.0, 1e-9);
    EXPECT_DOUBLE_EQ(cmp.prob_benefit, static_cast<double>(cmp.pairs - cmp.excluded_pairs) / static_cast<double>(cmp.pairs));
    EXPECT_GE(cmp.prob_benefit, 0.99);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_GE(cmp.delta_os.lower[i], 0.0);
}

TEST(Compare, IdenticalEnsemblesAreSymmetric) {
    auto grid = even_grid(3, 72);
    auto a = bsp_draws({0.04, 1.3, 30.0}, grid, 4000, 5);
    auto cmp = compare(a, a, 0.0, {24}, 99);
    EXPECT_EQ(cmp.excluded_pairs, 0u);
    EXPECT_NEAR(cmp.prob_benefit, 0.5, 0.02);
    EXPECT_NEAR(cmp.delta_median.estimate, 0.0, 0.2);
    auto unshuffled = compare(a, a, 0.0, {24});
    EXPECT_EQ(unshuffled.prob_benefit, 1.0);
    EXPECT_EQ(unshuffled.delta_os.upper[0], 0.0);
}

TEST(Compare, NegativeInfinityMarginGivesCertainty) {
    auto grid = even_grid(3, 72);
    auto a = bsp_draws({0.04, 1.3, 30.0}, grid, 500, 6);
    auto b = bsp_draws({0.03, 1.3, 30.0}, grid, 500, 7);
    auto cmp = compare(a, b, -std::numeric_limits<double>::infinity(), {});
    ASSERT_EQ(cmp.excluded_pairs, 0u);
    EXPECT_EQ(cmp.prob_benefit, 1.0);
}

TEST(Compare, NotReachedPairsAreExcludedAndCounted) {
    TimeGrid grid{{6, 12}};
    auto a = with_curves(grid, {{0.8, 0.4}, {0.8, 0.6}, {0.7, 0.3}});
    auto b = with_curves(grid, {{0.9, 0.45}, {0.9, 0.45}, {0.9, 0.7}});
    auto cmp = compare(a, b, 0.5, {});
    EXPECT_EQ(cmp.not_reached_a, 1u);
    EXPECT_EQ(cmp.not_reached_b, 1u);
    EXPECT_EQ(cmp.excluded_pairs, 2u);
    // pair 0: 6 + 6 * 0.4 / 0.45 - 10.5
    EXPECT_NEAR(cmp.delta_median.estimate, 6.0 + 6.0 * 0.4 / 0.45 - 10.5, 1e-12);
    EXPECT_DOUBLE_EQ(cmp.prob_benefit, 1.0 / 3.0);
}

TEST(Compare, GridOrSizeMismatchThrows) {
    auto a = with_curves(TimeGrid{{6, 12}}, {{0.8, 0.4}});
    auto b = with_curves(TimeGrid{{6, 13}}, {{0.8, 0.4}});
    EXPECT_THROW(compare(a, b, 3.0, {}), InputError);
    auto c = with_curves(TimeGrid{{6, 12}}, {{0.8, 0.4}, {0.8, 0.4}});
    EXPECT_THROW(compare(a, c, 3.0, {}), InputError);
}

TEST(Compare, JsonAndIntervalText) {
    EXPECT_EQ(format_interval({2.8, -2.0, 7.6}), "2.8 (-2.0, 7.6)");
    EXPECT_EQ(format_interval({0.45, 0.4, 0.5}, 2), "0.45 (0.40, 0.50)");
    auto grid = even_grid(3, 72);
    auto a = bsp_draws({0.04, 1.3, 30.0}, grid, 200, 8);
    auto cmp = compare(a, shift_one_step(a), 3.0, {12});
    auto j = comparison_to_json("mono", "dual", cmp);
    EXPECT_EQ(j["delta_median_text"], "3.0 (3.0, 3.0)");
    EXPECT_EQ(j["reference"], "mono");
    auto medians = format_medians("mono", "dual", cmp);
    EXPECT_EQ(std::count(medians.begin(), medians.end(), '\n'), 4);
}

TEST(FanPlot, RowCounts) {
    auto grid = even_grid(3, 72);
    auto ens = bsp_draws({0.04, 1.3, 30.0}, grid, 1000, 9);
    auto count_rows = [](const std::string& s) { return std::count(s.begin(), s.end(), '\n') - 2; };
    EXPECT_EQ(count_rows(fan_plot_data(ens)), 200 * 24);
    std::vector<DataPoint> pts{{0, 100}, {12, 60}, {24, 40}};
    auto overlay = standardize_curve(pts, StudyId{"CheckMate-9LA", std::nullopt}, "NIVO+IPI+CT").curve;
    EXPECT_EQ(count_rows(fan_plot_data(ens, {overlay, overlay})), 200 * 24 + 2 * 500);
    auto one = bsp_draws({0.04, 1.3, 30.0}, grid, 1, 9);
    EXPECT_EQ(count_rows(fan_plot_data(one)), 24);
    auto few = bsp_draws({0.04, 1.3, 30.0}, grid, 50, 9);
    EXPECT_EQ(count_rows(fan_plot_data(few)), 50 * 24);
}
