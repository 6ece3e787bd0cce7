#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "support/oracles.hpp"
#include "templaudit/parallel.hpp"
#include "templaudit/reliability.hpp"

namespace templaudit {
namespace {

std::vector<PredictionRecord> records_with(const std::vector<double>& rel) {
    std::vector<PredictionRecord> out;
    for (std::size_t i = 0; i < rel.size(); ++i) {
        PredictionRecord r;
        r.sample_id = "s" + std::to_string(i);
        r.attribute = "a";
        r.reliability = rel[i];
        out.push_back(r);
    }
    return out;
}

std::set<std::string> ids(const std::vector<PredictionRecord>& rs) {
    std::set<std::string> out;
    for (const auto& r : rs) out.insert(r.sample_id);
    return out;
}

TEST(ReliabilityScore, HandCases) {
    EXPECT_DOUBLE_EQ(reliability_score(std::vector<double>{1.0, 1.0, 1.0}, 0.5), 0.5);
    EXPECT_DOUBLE_EQ(reliability_score(std::vector<double>{1.0, 0.0}, 0.5), 0.0);
    EXPECT_NEAR(reliability_score(std::vector<double>{0.9, 0.8, 0.7}, 0.5), 0.35556, 1e-5);
    EXPECT_THROW(reliability_score(std::vector<double>{}, 0.5), RangeError);
}

TEST(ReliabilityScore, ConstantInputGivesScaledValue) {
    for (const double c : {0.0, 0.3, 0.77, 1.0})
        for (const double alpha : {0.0, 0.25, 0.5, 1.0})
            EXPECT_NEAR(reliability_score(std::vector<double>(17, c), alpha), (1.0 - alpha) * c, 1e-15);
}

TEST(ReliabilityScore, AgreesWithDoubleLoop) {
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<double> x(1 + rng.below(100));
        for (double& v : x) v = rng.uniform();
        const double alpha = rng.uniform();
        EXPECT_NEAR(reliability_score(x, alpha), oracle::reliability_double_loop(x, alpha), 1e-12);
    }
}

TEST(ReliabilityScore, PermutationInvariantAndBounded) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(2 + rng.below(60));
        for (double& v : x) v = rng.bernoulli(0.3) ? static_cast<double>(rng.below(2)) : rng.uniform();
        const double alpha = rng.uniform();
        const double rel = reliability_score(x, alpha);
        auto shuffled = x;
        rng.shuffle(shuffled);
        EXPECT_EQ(reliability_score(shuffled, alpha), rel);
        EXPECT_GE(rel, -alpha / 2.0 - 1e-15);
        EXPECT_LE(rel, 1.0 - alpha + 1e-15);
        EXPECT_LE(rel, (1.0 - alpha) * *std::max_element(x.begin(), x.end()) + 1e-15);
    }
}

TEST(PredictWithReliability, TwoPassStack) {
    const PassStack stack{{Matrix::from_rows({{0.9, 0.1}})}, {Matrix::from_rows({{0.7, 0.3}})}};
    ReliabilityConfig cfg;
    cfg.m = 2;
    const std::vector<std::string> ids{"s"}, attrs{"a"};
    const auto r = predict_with_reliability(stack, cfg, ids, attrs);
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r[0].predicted_class, 0u);
    EXPECT_EQ(r[0].passes, (std::vector<double>{0.9, 0.7}));
    EXPECT_NEAR(r[0].reliability, 0.35, 1e-15);
}

TEST(PredictWithReliability, IdenticalPassesAndOrderInvariance) {
    const Matrix p = Matrix::from_rows({{0.2, 0.5, 0.3}, {0.6, 0.1, 0.3}});
    ReliabilityConfig cfg;
    cfg.alpha = 0.25;
    const std::vector<std::string> ids{"x", "y"}, attrs{"hair"};
    const auto r = predict_with_reliability(PassStack(5, {p}), cfg, ids, attrs);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].predicted_class, 1u);
    EXPECT_NEAR(r[0].reliability, 0.75 * 0.5, 1e-15);
    EXPECT_EQ(r[1].predicted_class, 0u);

    Rng rng(3);
    PassStack stack;
    for (int i = 0; i < 7; ++i) {
        Matrix m(2, 3);
        for (std::size_t row = 0; row < 2; ++row) {
            double s = 0.0;
            for (double& v : m.row(row)) s += (v = rng.uniform());
            for (double& v : m.row(row)) v /= s;
        }
        stack.push_back({m});
    }
    const auto a = predict_with_reliability(stack, cfg, ids, attrs);
    std::reverse(stack.begin(), stack.end());
    const auto b = predict_with_reliability(stack, cfg, ids, attrs);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].predicted_class, b[i].predicted_class);
        EXPECT_NEAR(a[i].reliability, b[i].reliability, 1e-15);
    }
}

TEST(PredictWithReliability, DeterministicVariantUsesGivenOutput) {
    const PassStack stack{{Matrix::from_rows({{0.9, 0.1}})}, {Matrix::from_rows({{0.7, 0.3}})}};
    const std::vector<Matrix> det{Matrix::from_rows({{0.4, 0.6}})};
    ReliabilityConfig cfg;
    cfg.deterministic_class = true;
    const std::vector<std::string> ids{"s"}, attrs{"a"};
    const auto r = predict_with_reliability(stack, cfg, ids, attrs, &det);
    EXPECT_EQ(r[0].predicted_class, 1u);
    EXPECT_EQ(r[0].passes, (std::vector<double>{0.1, 0.3}));
}

TEST(PredictWithReliability, RejectsInconsistentStacks) {
    ReliabilityConfig cfg;
    const std::vector<std::string> ids{"s"}, attrs{"a"}, two{"a", "b"};
    EXPECT_THROW(predict_with_reliability({}, cfg, ids, attrs), ShapeError);
    const PassStack bad{{Matrix(1, 2)}, {Matrix(2, 2)}};
    EXPECT_THROW(predict_with_reliability(bad, cfg, ids, attrs), ShapeError);
    EXPECT_THROW(predict_with_reliability(PassStack{{Matrix(1, 2)}}, cfg, ids, two), ShapeError);
}

TEST(RcpFilter, HandCases) {
    const auto rs = records_with({0.4, 0.1, 0.3, 0.2});
    EXPECT_EQ(ids(rcp_filter(rs, 0.5)), (std::set<std::string>{"s0", "s2"}));
    EXPECT_EQ(rcp_filter(rs, 1.0).size(), 4u);
    const auto tied = records_with({0.5, 0.5, 0.5, 0.5, 0.5});
    EXPECT_EQ(ids(rcp_filter(tied, 0.5)), (std::set<std::string>{"s0", "s1", "s2"}));
    EXPECT_THROW(rcp_filter(std::vector<PredictionRecord>{}, 0.5), RangeError);
    EXPECT_THROW(rcp_filter(rs, 0.0), RangeError);
    EXPECT_THROW(rcp_filter(rs, 1.5), RangeError);
}

TEST(RcpFilter, KeepCountIsExactCeiling) {
    EXPECT_EQ(rcp_keep_count(10, 0.7), 7u);
    EXPECT_EQ(rcp_keep_count(10, 0.71), 8u);
    EXPECT_EQ(rcp_keep_count(3, 0.5), 2u);
    EXPECT_EQ(rcp_keep_count(1, 0.01), 1u);
    for (std::size_t n = 1; n < 200; ++n) EXPECT_EQ(rcp_keep_count(n, 0.5), (n + 1) / 2);
}

TEST(RcpFilter, SmallerFractionKeepsSubset) {
    Rng rng(4);
    std::vector<double> rel(200);
    for (double& v : rel) v = std::round(rng.uniform() * 20.0) / 20.0;  // plenty of ties
    const auto rs = records_with(rel);
    std::set<std::string> previous;
    for (const double f : {0.1, 0.25, 0.5, 0.75, 1.0}) {
        const auto kept = ids(rcp_filter(rs, f));
        EXPECT_TRUE(std::includes(kept.begin(), kept.end(), previous.begin(), previous.end())) << f;
        previous = kept;
    }
}

MacModel tiny_model(double p_drop) {
    MacSpec spec;
    spec.n_in = 4;
    spec.trunk_sizes = {6};
    spec.branch_sizes = {5};
    spec.heads = {{"a", 2}, {"b", 3}};
    spec.p_drop = p_drop;
    Rng rng(5);
    return build_mac(spec, rng);
}

TEST(McPasses, ZeroDropoutEqualsInfer) {
    const auto m = tiny_model(0.0);
    Matrix x(3, 4);
    Rng rng(6);
    for (double& v : x.values()) v = rng.normal();
    ReliabilityConfig cfg;
    cfg.m = 10;
    const auto stack = mc_passes(m, x, cfg, rng);
    const auto infer = predict(m, x, ForwardMode::Infer);
    ASSERT_EQ(stack.size(), 10u);
    for (const auto& pass : stack)
        for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(pass[h], infer[h]);
}

TEST(McPasses, SameSeedSameStackForAnyWorkerCount) {
    const auto m = tiny_model(0.5);
    Matrix x(3, 4);
    Rng rng(7);
    for (double& v : x.values()) v = rng.normal();
    ReliabilityConfig cfg;
    cfg.m = 12;
    const auto saved = worker_count();
    set_worker_count(1);
    const auto a = mc_passes(m, x, cfg, Rng(8));
    set_worker_count(4);
    const auto b = mc_passes(m, x, cfg, Rng(8));
    set_worker_count(saved);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(a[i][h], b[i][h]);
    EXPECT_NE(a[0][0], a[1][0]);
    cfg.m = 0;
    EXPECT_THROW(mc_passes(m, x, cfg, Rng(8)), ConfigError);
}

TEST(PredictionsCsv, Format) {
    auto rs = records_with({0.25});
    rs[0].predicted_class = 1;
    EXPECT_EQ(predictions_to_csv(rs), "sample_id,attribute,predicted_class,reliability\ns0,a,1,0.25\n");
}

}  // namespace
}  // namespace templaudit
