#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <random>

#include "memgauge/memgauge.hpp"
#include "oracles.hpp"

using namespace memgauge;

namespace {

double boost_two_sided(double t, double df) {
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

} // namespace

TEST(Cies, PartitionIsExhaustiveAndDisjoint) {
    const std::vector<Label> y{0, 1, 2, 0, 1, 2};
    const std::vector<Label> ref{0, 1, 0, 1, 1, 0};
    const std::vector<Label> comp{0, 2, 2, 2, 1, 1};
    const auto r = find_cies(ref, comp, y);
    EXPECT_EQ(r.non_cie, (std::vector<std::size_t>{0, 4}));
    EXPECT_EQ(r.cie, (std::vector<std::size_t>{1, 2, 3, 5}));
    EXPECT_EQ(r.cie_u, (std::vector<std::size_t>{1}));
    EXPECT_EQ(r.cie_c, (std::vector<std::size_t>{2}));
    EXPECT_EQ(r.cie_w, (std::vector<std::size_t>{3, 5}));
    EXPECT_EQ(r.n_examples(), 6u);
    const std::vector<Label> shorter{0};
    EXPECT_THROW(find_cies(ref, shorter, y), DimensionError);
}

TEST(Cies, IdenticalModelsHaveNoCies) {
    const std::vector<Label> y{0, 1, 1}, p{1, 1, 0};
    const auto r = find_cies(p, p, y);
    EXPECT_TRUE(r.cie.empty());
    EXPECT_EQ(r.non_cie.size(), 3u);
}

TEST(TTest, PooledFixture) {
    const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 3, 4, 5, 6};
    const auto r = ttest_two_sample(a, b);
    EXPECT_NEAR(r.t_statistic, -1.0, 1e-12);
    EXPECT_DOUBLE_EQ(r.degrees_of_freedom, 8.0);
    EXPECT_NEAR(r.p_value, boost_two_sided(-1.0, 8.0), 1e-12);
    EXPECT_NEAR(r.p_value, 0.3466, 1e-4);
    EXPECT_FALSE(r.significant_at_005);
    EXPECT_DOUBLE_EQ(r.mean_a, 3.0);
}

TEST(TTest, WelchMatchesHandFormula) {
    const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 30, 40, 50, 60};
    const auto r = ttest_two_sample(a, b, TTestVariant::welch);
    const double va = 5.0 / 3.0, vb = 350.0, qa = va / 4, qb = vb / 6;
    EXPECT_NEAR(r.t_statistic, (2.5 - 35) / std::sqrt(qa + qb), 1e-12);
    EXPECT_NEAR(r.degrees_of_freedom, (qa + qb) * (qa + qb) / (qa * qa / 3 + qb * qb / 5), 1e-10);
    EXPECT_NEAR(r.p_value, boost_two_sided(r.t_statistic, r.degrees_of_freedom), 1e-12);
    EXPECT_TRUE(r.significant_at_005);
}

TEST(TTest, DegenerateInputs) {
    const std::vector<double> one{1}, two{1, 2}, flat{3, 3, 3}, flat2{4, 4};
    EXPECT_THROW(ttest_two_sample(one, two), DegenerateTestError);
    EXPECT_THROW(ttest_two_sample(flat, flat2), DegenerateTestError);
    const std::vector<double> nan{1, std::nan("")};
    EXPECT_THROW(ttest_two_sample(nan, two), DegenerateTestError);
    // one constant group is fine
    EXPECT_NO_THROW(ttest_two_sample(flat, two));
}

TEST(TTest, AntisymmetryAndScaleInvariance) {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<std::size_t> size(2, 40);
    std::uniform_real_distribution<double> scale(1e-6, 1e6), shift(-100, 100);
    for (int rep = 0; rep < 200; ++rep) {
        const auto a = oracle::random_normal(rng, size(rng), 0.0, 1.0);
        const auto b = oracle::random_normal(rng, size(rng), 0.3, 2.0);
        for (auto v : {TTestVariant::student_pooled, TTestVariant::welch}) {
            const auto ab = ttest_two_sample(a, b, v), ba = ttest_two_sample(b, a, v);
            EXPECT_LE(rel_diff(ab.t_statistic, -ba.t_statistic), 1e-12);
            EXPECT_LE(rel_diff(ab.p_value, ba.p_value), 1e-12);
            const double c = scale(rng), s = shift(rng);
            auto sa = a, sb = b;
            for (auto& x : sa)
                x = c * x + s;
            for (auto& x : sb)
                x = c * x + s;
            const auto scaled = ttest_two_sample(sa, sb, v);
            EXPECT_NEAR(scaled.t_statistic, ab.t_statistic, 1e-9 * std::max(1.0, std::abs(ab.t_statistic)));
        }
    }
}

TEST(SpecialFunctions, IncompleteBetaAgreesWithBoost) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ab(0.05, 200), x(0.0, 1.0);
    for (int rep = 0; rep < 500; ++rep) {
        const double a = ab(rng), b = ab(rng), xx = x(rng);
        const double mine = special::incomplete_beta(a, b, xx);
        const double ref = boost::math::ibeta(a, b, xx);
        EXPECT_NEAR(mine, ref, 1e-12 + 1e-10 * ref) << a << " " << b << " " << xx;
    }
    EXPECT_EQ(special::incomplete_beta(2, 3, 0.0), 0.0);
    EXPECT_EQ(special::incomplete_beta(2, 3, 1.0), 1.0);
}

TEST(SpecialFunctions, TwoSidedPValueAcrossDegreesOfFreedom) {
    for (double df : {1.0, 2.5, 8.0, 30.0, 1e3, 1e5, 1e6}) {
        for (double t : {0.01, 0.5, 1.0, 1.96, 3.0, 6.0, 12.0}) {
            const double mine = special::student_t_two_sided(t, df);
            const double ref = boost_two_sided(t, df);
            EXPECT_LE(std::abs(mine - ref), 1e-10 * std::max(ref, 1e-300) + 1e-300) << "t=" << t << " df=" << df;
            EXPECT_DOUBLE_EQ(mine, special::student_t_two_sided(-t, df));
        }
    }
    EXPECT_EQ(special::student_t_two_sided(0.0, 5), 1.0);
    EXPECT_EQ(special::student_t_two_sided(INFINITY, 5), 0.0);
    EXPECT_THROW(special::student_t_two_sided(1.0, 0.0), Error);
}

TEST(SpecialFunctions, LogBetaMatchesLgamma) {
    for (double a : {0.5, 3.0, 25.0, 1e4})
        for (double b : {0.5, 2.0, 40.0})
            EXPECT_NEAR(special::log_beta(a, b), std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b),
                        1e-9 * std::max(1.0, std::abs(std::lgamma(a + b))));
}

TEST(CieInfluenceTest, ComparesSubsetAgainstNonCies) {
    InfluenceMatrix I;
    I.row_role = Role::test;
    I.values.resize(6, 2);
    const float rows[6][2] = {{0.5f, 0.3f}, {0.4f, 0.6f}, {0.0f, 0.1f}, {0.1f, 0.0f}, {0.0f, 0.0f}, {0.05f, 0.0f}};
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            I.values(i, j) = rows[i][j];
    I.counts_included = {1, 1};
    I.counts_excluded = {1, 1};
    CieReport r;
    r.cie = {0, 1};
    r.cie_u = {0, 1};
    r.non_cie = {2, 3, 4, 5};
    const auto t = cie_influence_test(I, r, CieSubset::all_cie);
    const auto means = mean_received_influence(I);
    const std::vector<double> a{means[0], means[1]}, b{means[2], means[3], means[4], means[5]};
    EXPECT_DOUBLE_EQ(t.t_statistic, ttest_two_sample(a, b).t_statistic);
    EXPECT_GT(t.t_statistic, 0.0);
    EXPECT_THROW(cie_influence_test(I, r, CieSubset::cie_c), DegenerateTestError);
    I.row_role = Role::train;
    EXPECT_THROW(cie_influence_test(I, r, CieSubset::all_cie), ShapeError);
    I.row_role = Role::test;
    r.non_cie.pop_back();
    EXPECT_THROW(cie_influence_test(I, r, CieSubset::all_cie), DimensionError);
}

TEST(Histogram, BinsCountsAndEdgeCases) {
    const std::vector<double> v{0, 1, 2, 3, 4, std::nan(""), INFINITY};
    const auto h = histogram(v, 4);
    EXPECT_EQ(h.bin_edges.size(), 5u);
    EXPECT_EQ(h.counts, (std::vector<std::size_t>{1, 1, 1, 2}));
    EXPECT_EQ(h.non_finite, 2u);
    EXPECT_EQ(h.total(), 5u);
    EXPECT_TRUE(h.log_scale_hint);

    const std::vector<double> same{2, 2, 2};
    const auto one = histogram(same, 10);
    EXPECT_EQ(one.counts, (std::vector<std::size_t>{3}));
    const std::vector<double> none{std::nan("")};
    EXPECT_THROW(histogram(none, 3), EmptyDataError);
    EXPECT_THROW(histogram(v, 0), ConfigError);
}

TEST(Serialization, ReportTypesRoundTrip) {
    CieReport r;
    r.cie = {1};
    r.cie_u = {1};
    r.non_cie = {0, 2};
    r.ref_model_id = "a";
    r.comp_model_id = "b";
    EXPECT_EQ(cie_report_from_json(to_json(r)), r);
    EXPECT_EQ(to_json(r)["counts"]["non_cie"], 2);

    ModelSpec s{Architecture::mlp, {64}, Activation::tanh, 16, 4};
    EXPECT_EQ(model_spec_from_json(to_json(s)), s);
    TrainConfig tc;
    tc.epochs = 7;
    tc.checkpoint_selection = CheckpointSelection::final;
    const auto back = train_config_from_json(to_json(tc));
    EXPECT_EQ(back.epochs, 7u);
    EXPECT_EQ(back.checkpoint_selection, CheckpointSelection::final);

    TTestResult t;
    t.t_statistic = std::nan("");
    EXPECT_TRUE(to_json(t)["t_statistic"].is_null());
}
