#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "support/planted.hpp"
#include "templaudit/training.hpp"

namespace templaudit {
namespace {

Matrix probs(const std::vector<std::vector<double>>& rows) { return Matrix::from_rows(rows); }

planted::PlantedData separable(std::size_t n, std::uint64_t seed) {
    planted::PlantedOptions opt;
    opt.n_samples = n;
    opt.n_in = 8;
    opt.kinds = {planted::Kind::Linear, planted::Kind::Linear};
    opt.seed = seed;
    return planted::make_planted(opt);
}

TrainConfig quick_config(std::size_t epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.learning_rate = 1e-2;
    cfg.seed = 7;
    return cfg;
}

TEST(MultitaskLoss, UniformBinaryIsLnTwo) {
    const auto r = multitask_loss({probs({{0.5, 0.5}, {0.5, 0.5}})}, {{0, 1}});
    EXPECT_NEAR(r.loss, 0.693147, 1e-6);
    EXPECT_NEAR(r.grads[0](0, 0), -1.0, 1e-15);  // -1 / (n p) with n = 2, p = 0.5
    EXPECT_EQ(r.grads[0](0, 1), 0.0);
}

TEST(MultitaskLoss, UndefinedTargetsAreMasked) {
    const auto a = multitask_loss({probs({{0.9, 0.1}, {0.2, 0.8}})}, {{0, kUndefined}});
    EXPECT_NEAR(a.loss, -std::log(0.9), 1e-15);
    EXPECT_EQ(a.grads[0](1, 0), 0.0);
    EXPECT_EQ(a.grads[0](1, 1), 0.0);
    const auto b = multitask_loss({probs({{0.9, 0.1}})}, {{kUndefined}});
    EXPECT_EQ(b.loss, 0.0);
}

TEST(MultitaskLoss, DuplicatedHeadDoublesTheLoss) {
    const Matrix p = probs({{0.7, 0.3}, {0.4, 0.6}});
    const auto one = multitask_loss({p}, {{0, 1}});
    const auto two = multitask_loss({p, p}, {{0, 1}, {0, 1}});
    EXPECT_NEAR(two.loss, 2.0 * one.loss, 1e-15);
}

TEST(MultitaskLoss, ClassWeightsScaleTerms) {
    const Matrix p = probs({{0.7, 0.3}, {0.4, 0.6}});
    const std::vector<std::vector<double>> w{{2.0, 0.5}};
    const auto r = multitask_loss({p}, {{0, 1}}, &w);
    EXPECT_NEAR(r.loss, (-2.0 * std::log(0.7) - 0.5 * std::log(0.6)) / 2.0, 1e-15);
}

TEST(MultitaskLoss, RejectsMismatchedShapes) {
    const Matrix p = probs({{0.5, 0.5}});
    EXPECT_THROW(multitask_loss({p}, {}), ShapeError);
    EXPECT_THROW(multitask_loss({p}, {{0, 1}}), ShapeError);
    EXPECT_THROW(multitask_loss({p}, {{2}}), DataError);
}

TEST(LearningRate, DecayDefaultsToRateOverEpochs) {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 200;
    EXPECT_DOUBLE_EQ(cfg.decay_rate(), 5e-6);
    EXPECT_DOUBLE_EQ(lr_schedule(cfg, 0), 1e-3);
    EXPECT_NEAR(lr_schedule(cfg, 200000), 5e-4, 1e-18);
    cfg.decay = 0.0;
    EXPECT_DOUBLE_EQ(lr_schedule(cfg, 123456), 1e-3);
}

struct Scalar {
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<ParameterBlock> blocks() { return {{"p", value, grad}}; }
};

TEST(Adam, FirstStepIsSignedLearningRate) {
    for (const double g : {3.0, -0.02, 1e-6}) {
        Scalar s{{1.0}, {g}};
        AdamState st;
        adam_step(st, s.blocks(), 0.1);
        EXPECT_NEAR(s.value[0], 1.0 - 0.1 * g / (std::abs(g) + 1e-8), 1e-15);
    }
}

TEST(Adam, TwoStepsMatchHandUnroll) {
    Scalar s{{0.5, -2.0}, {0.3, -1.5}};
    AdamState st;
    auto blocks = s.blocks();
    adam_step(st, blocks, 0.01);
    s.grad = {-0.1, 0.4};
    blocks = s.blocks();
    adam_step(st, blocks, 0.005);

    const double g1[2] = {0.3, -1.5}, g2[2] = {-0.1, 0.4}, p0[2] = {0.5, -2.0};
    for (int i = 0; i < 2; ++i) {
        double m = 0.1 * g1[i], v = 0.001 * g1[i] * g1[i];
        double p = p0[i] - 0.01 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
        m = 0.9 * m + 0.1 * g2[i];
        v = 0.999 * v + 0.001 * g2[i] * g2[i];
        const double c1 = 1.0 - 0.9 * 0.9, c2 = 1.0 - 0.999 * 0.999;
        p -= 0.005 * (m / c1) / (std::sqrt(v / c2) + 1e-8);
        EXPECT_NEAR(s.value[static_cast<std::size_t>(i)], p, 1e-15);
    }
}

TEST(Adam, ZeroGradientOrRateLeavesParameters) {
    Scalar s{{0.25, 4.0}, {0.0, 0.0}};
    AdamState st;
    adam_step(st, s.blocks(), 0.1);
    EXPECT_EQ(s.value, (std::vector<double>{0.25, 4.0}));
    s.grad = {1.0, -3.0};
    adam_step(st, s.blocks(), 0.0);
    EXPECT_EQ(s.value, (std::vector<double>{0.25, 4.0}));
}

TEST(Adam, RejectsNonFiniteGradient) {
    Scalar s{{1.0}, {std::nan("")}};
    AdamState st;
    EXPECT_THROW(adam_step(st, s.blocks(), 0.1), NumericError);
    EXPECT_EQ(s.value[0], 1.0);
}

TEST(Train, ZeroEpochsIsANoOp) {
    const auto d = separable(200, 1);
    Rng rng(2);
    auto m = build_mac(spec_for(d.data, {8}, {8}), rng);
    const auto before = m;
    const auto history = train(m, d.data, quick_config(0));
    EXPECT_TRUE(history.epoch_loss.empty());
    EXPECT_EQ(m.trunk, before.trunk);
    EXPECT_EQ(m.branches, before.branches);
}

TEST(Train, DeterministicForSeed) {
    const auto d = separable(300, 2);
    Rng r1(3), r2(3);
    auto a = build_mac(spec_for(d.data, {16}, {8}), r1);
    auto b = build_mac(spec_for(d.data, {16}, {8}), r2);
    const auto ha = train(a, d.data, quick_config(3));
    const auto hb = train(b, d.data, quick_config(3));
    EXPECT_EQ(ha.epoch_loss, hb.epoch_loss);
    EXPECT_EQ(a.trunk, b.trunk);
    EXPECT_EQ(a.branches, b.branches);
}

TEST(Train, LearnsSeparableProblem) {
    const auto d = separable(1200, 3);
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < d.data.size(); ++i) (i % 5 == 0 ? test_idx : train_idx).push_back(i);
    const auto train_set = d.data.rows(train_idx);
    const auto test_set = d.data.rows(test_idx);
    Rng rng(4);
    auto m = build_mac(spec_for(train_set, {32}, {16}), rng);
    const auto history = train(m, train_set, quick_config(25));
    EXPECT_LT(history.epoch_loss.back(), history.epoch_loss.front());
    for (const auto& acc : evaluate_balanced_accuracy(m, test_set)) {
        ASSERT_TRUE(acc.has_value());
        EXPECT_GE(*acc, 0.95);
    }
}

TEST(Train, ValidatesConfiguration) {
    const auto d = separable(50, 5);
    Rng rng(5);
    auto m = build_mac(spec_for(d.data, {4}, {4}), rng);
    auto cfg = quick_config(1);
    cfg.batch_size = 1;
    EXPECT_THROW(train(m, d.data, cfg), ConfigError);
    cfg.batch_size = 51;
    EXPECT_THROW(train(m, d.data, cfg), ConfigError);
    auto other = build_mac(spec_for(d.data, {4}, {4}), rng);
    other.spec.heads[0].name = "absent";
    EXPECT_THROW(train(other, d.data, quick_config(1)), DataError);
}

TEST(Train, HeadOrderDoesNotChangeInferenceOrLoss) {
    const auto d = separable(64, 6);
    Rng rng(6);
    auto m = build_mac(spec_for(d.data, {8}, {6}), rng);
    MacModel swapped = m;
    std::swap(swapped.spec.heads[0], swapped.spec.heads[1]);
    std::swap(swapped.branches[0], swapped.branches[1]);
    const auto a = predict(m, d.data.vectors, ForwardMode::Infer);
    const auto b = predict(swapped, d.data.vectors, ForwardMode::Infer);
    EXPECT_EQ(a[0], b[1]);
    EXPECT_EQ(a[1], b[0]);
    const auto la = multitask_loss(a, {d.data.labels.column(0), d.data.labels.column(1)});
    const auto lb = multitask_loss(b, {d.data.labels.column(1), d.data.labels.column(0)});
    EXPECT_NEAR(la.loss, lb.loss, 1e-15);
}

TEST(StructureSearch, RunsEveryCandidateRepeatPair) {
    const auto d = separable(240, 7);
    std::vector<std::size_t> tr, va;
    for (std::size_t i = 0; i < d.data.size(); ++i) (i % 4 == 0 ? va : tr).push_back(i);
    SearchSpace space;
    space.layer_sizes = {4, 8};
    space.trunk_depths = {1, 2};
    space.branch_depths = {1};
    space.n_candidates = 3;
    space.n_repeats = 2;
    const auto train_set = d.data.rows(tr);
    const auto base = spec_for(train_set, {}, {});
    const auto r = structure_search(space, train_set, d.data.rows(va), base, quick_config(2));
    ASSERT_EQ(r.runs.size(), 6u);
    ASSERT_EQ(r.candidates.size(), 3u);
    std::set<std::uint64_t> seeds;
    for (std::size_t k = 0; k < r.runs.size(); ++k) {
        EXPECT_EQ(r.runs[k].candidate, k / 2);
        EXPECT_EQ(r.runs[k].repeat, k % 2);
        seeds.insert(r.runs[k].seed);
    }
    EXPECT_EQ(seeds.size(), 6u);
    for (const auto& c : r.candidates) {
        EXPECT_GE(c.spec.trunk_sizes.size(), 1u);
        EXPECT_LE(c.spec.trunk_sizes.size(), 2u);
        EXPECT_EQ(c.spec.branch_sizes.size(), 1u);
        EXPECT_GE(r.candidates[r.chosen_index].stability, 0.0);
        EXPECT_LE(r.candidates[r.chosen_index].stability, c.stability);
    }
    EXPECT_EQ(r.chosen, r.candidates[r.chosen_index].spec);

    const auto text = search_report_to_csv(r);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 7);
    const auto again = structure_search(space, train_set, d.data.rows(va), base, quick_config(2));
    EXPECT_EQ(search_report_to_csv(again), text);
}

TEST(StructureSearch, RejectsSingleRepeat) {
    const auto d = separable(40, 8);
    SearchSpace space;
    space.n_repeats = 1;
    EXPECT_THROW(structure_search(space, d.data, d.data, spec_for(d.data), quick_config(1)), ConfigError);
}

TEST(HistoryCsv, OneRowPerEpoch) {
    TrainHistory h{{0.5, 0.25}};
    EXPECT_EQ(history_to_csv(h), "epoch,loss\n1,0.5\n2,0.25\n");
}

}  // namespace
}  // namespace templaudit
