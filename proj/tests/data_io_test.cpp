#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support/tmpdir.hpp"
#include "templaudit/data_io.hpp"

namespace templaudit {
namespace {

using testing::TempDir;

const std::vector<AttributeMeta> kMetas{{"male", "demographics", 2}, {"hair", "hair", 3}};

EmbeddingSet one_sample_per_subject(std::size_t n) {
    EmbeddingSet e;
    e.vectors = Matrix(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        e.sample_ids.push_back("s" + std::to_string(i));
        e.subject_ids.push_back("p" + std::to_string(i));
    }
    return e;
}

TEST(LoadEmbeddings, ReadsWellFormedFile) {
    TempDir dir;
    const auto p = dir.file("e.csv", "sample_id,subject_id,e0,e1\na,p1,0.5,-1\n\nb,p1,2,3e-2\n");
    const auto e = load_embeddings(p);
    ASSERT_EQ(e.size(), 2u);
    EXPECT_EQ(e.dim(), 2u);
    EXPECT_EQ(e.sample_ids[1], "b");
    EXPECT_EQ(e.subject_ids[0], "p1");
    EXPECT_DOUBLE_EQ(e.vectors(1, 1), 0.03);
}

TEST(LoadEmbeddings, RaggedRowReportsLine) {
    TempDir dir;
    const auto p = dir.file("e.csv", "sample_id,subject_id,e0,e1\na,p1,0.5,-1\nb,p1,2\n");
    try {
        load_embeddings(p);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
}

TEST(LoadEmbeddings, RejectsBadInput) {
    TempDir dir;
    EXPECT_THROW(load_embeddings(dir.file("a.csv", "sample_id,subject_id,e0\na,p,x\n")), ParseError);
    EXPECT_THROW(load_embeddings(dir.file("b.csv", "sample_id,subject_id,e0\na,p,1\na,q,2\n")), ParseError);
    EXPECT_THROW(load_embeddings(dir.file("c.csv", "sample_id,subject_id,e0\n")), ParseError);
    EXPECT_THROW(load_embeddings(dir.file("d.csv", "id,subject_id,e0\na,p,1\n")), ParseError);
    EXPECT_THROW(load_embeddings(dir.file("e.csv", "sample_id,subject_id,e1\na,p,1\n")), ParseError);
    EXPECT_THROW(load_embeddings(dir.file("f.csv", "sample_id,subject_id,e0\na,p,nan\n")), ParseError);
    EXPECT_THROW(load_embeddings(dir / "missing.csv"), ParseError);
}

TEST(LoadEmbeddings, RoundTripsThroughCsv) {
    EmbeddingSet e;
    e.sample_ids = {"x", "y"};
    e.subject_ids = {"p", "q"};
    e.vectors = Matrix::from_rows({{0.1, 1.0 / 3.0}, {-2.5e-17, 12345.678}});
    TempDir dir;
    const auto back = load_embeddings(dir.file("e.csv", embeddings_to_csv(e)));
    EXPECT_EQ(back.sample_ids, e.sample_ids);
    EXPECT_EQ(back.subject_ids, e.subject_ids);
    EXPECT_EQ(back.vectors, e.vectors);
}

TEST(LoadLabels, ParsesBinaryMultiClassAndUndefined) {
    TempDir dir;
    const auto p = dir.file("l.csv", "sample_id,hair,male\na,2,1\nb,?,0\n");
    const auto l = load_labels(p, kMetas);
    ASSERT_EQ(l.n_attributes(), 2u);
    EXPECT_EQ(l.attributes[0].name, "hair");
    EXPECT_EQ(l.at(0, 0), 2);
    EXPECT_EQ(l.at(1, 0), kUndefined);
    EXPECT_EQ(l.at(1, 1), kFalse);
    EXPECT_EQ(l.attribute_index("male"), 1u);
    EXPECT_THROW(l.attribute_index("bald"), DataError);
}

TEST(LoadLabels, RejectsIllegalCells) {
    TempDir dir;
    EXPECT_THROW(load_labels(dir.file("a.csv", "sample_id,male\na,2\n"), kMetas), ParseError);
    EXPECT_THROW(load_labels(dir.file("b.csv", "sample_id,male\na,-1\n"), kMetas), ParseError);
    EXPECT_THROW(load_labels(dir.file("c.csv", "sample_id,male\na,yes\n"), kMetas), ParseError);
    EXPECT_THROW(load_labels(dir.file("d.csv", "sample_id,bald\na,1\n"), kMetas), ParseError);
    EXPECT_THROW(load_labels(dir.file("e.csv", "sample_id,male,male\na,1,1\n"), kMetas), ParseError);
}

TEST(LoadLabels, RoundTripsThroughCsv) {
    TempDir dir;
    const auto l = load_labels(dir.file("l.csv", "sample_id,male,hair\na,1,?\nb,?,0\nc,0,2\n"), kMetas);
    EXPECT_EQ(load_labels(dir.file("m.csv", labels_to_csv(l)), kMetas), l);
}

TEST(LoadAttributeMeta, HeaderIsOptional) {
    TempDir dir;
    const auto a = load_attribute_meta(dir.file("a.csv", "name,category,n_out\nmale,demographics,2\n"));
    const auto b = load_attribute_meta(dir.file("b.csv", "male,demographics,2\n"));
    EXPECT_EQ(a, b);
    EXPECT_THROW(load_attribute_meta(dir.file("c.csv", "male,demographics,1\n")), ParseError);
    EXPECT_THROW(load_attribute_meta(dir.file("d.csv", "male,x,2\nmale,y,2\n")), ParseError);
    EXPECT_EQ(load_attribute_meta(dir.file("e.csv", attribute_meta_to_csv(kMetas))), kMetas);
}

TEST(SubjectSplit, TenSingleSampleSubjectsSplitSevenThree) {
    Rng rng(1);
    const auto s = subject_exclusive_split(one_sample_per_subject(10), 0.7, rng);
    EXPECT_EQ(s.train_sample_ids.size(), 7u);
    EXPECT_EQ(s.test_sample_ids.size(), 3u);
}

TEST(SubjectSplit, SubjectsNeverStraddleSides) {
    EmbeddingSet e;
    e.vectors = Matrix(200, 1);
    for (std::size_t i = 0; i < 200; ++i) {
        e.sample_ids.push_back("s" + std::to_string(i));
        e.subject_ids.push_back("p" + std::to_string((i * 7) % 23));
    }
    Rng rng(3);
    const auto s = subject_exclusive_split(e, 0.7, rng);
    std::set<std::string> train_subjects, test_subjects;
    for (std::size_t i = 0; i < e.size(); ++i) {
        const bool in_train = s.train_sample_ids.contains(e.sample_ids[i]);
        EXPECT_NE(in_train, s.test_sample_ids.contains(e.sample_ids[i]));
        (in_train ? train_subjects : test_subjects).insert(e.subject_ids[i]);
    }
    for (const auto& subj : train_subjects) EXPECT_FALSE(test_subjects.contains(subj)) << subj;
    EXPECT_FALSE(test_subjects.empty());
}

TEST(SubjectSplit, DeterministicUnderSeed) {
    const auto e = one_sample_per_subject(50);
    Rng a(9), b(9), c(10);
    const auto sa = subject_exclusive_split(e, 0.5, a);
    EXPECT_EQ(sa.train_sample_ids, subject_exclusive_split(e, 0.5, b).train_sample_ids);
    EXPECT_NE(sa.train_sample_ids, subject_exclusive_split(e, 0.5, c).train_sample_ids);
}

TEST(SubjectSplit, RejectsSingleSubjectAndBadFraction) {
    auto e = one_sample_per_subject(3);
    Rng rng(1);
    EXPECT_THROW(subject_exclusive_split(e, 0.0, rng), SplitError);
    EXPECT_THROW(subject_exclusive_split(e, 1.0, rng), SplitError);
    e.subject_ids.assign(3, "same");
    EXPECT_THROW(subject_exclusive_split(e, 0.7, rng), SplitError);
}

TEST(SubjectSplit, RoundTripsThroughCsv) {
    Rng rng(2);
    const auto s = subject_exclusive_split(one_sample_per_subject(20), 0.6, rng);
    TempDir dir;
    const auto back = load_split(dir.file("s.csv", split_to_csv(s)));
    EXPECT_EQ(back.train_sample_ids, s.train_sample_ids);
    EXPECT_EQ(back.test_sample_ids, s.test_sample_ids);
    EXPECT_THROW(load_split(dir.file("t.csv", "sample_id,side\na,train\na,test\n")), ParseError);
    EXPECT_THROW(load_split(dir.file("u.csv", "sample_id,side\na,both\n")), ParseError);
}

TEST(ClassWeights, ThreeToOne) {
    const std::vector<int> y{0, 0, 0, 1};
    const auto w = class_balance_weights(y, 2);
    EXPECT_NEAR(w[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(w[1], 2.0, 1e-12);
}

TEST(ClassWeights, WeightedCountsSumToN) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = 2 + rng.below(4);
        std::vector<int> y(50 + rng.below(100));
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i < k ? i : rng.below(k));
        const auto w = class_balance_weights(y, k);
        double total = 0.0;
        for (const int c : y) total += w[static_cast<std::size_t>(c)];
        EXPECT_NEAR(total, static_cast<double>(y.size()), 1e-9);
    }
}

TEST(ClassWeights, IgnoresUndefinedAndRejectsMissingClass) {
    const std::vector<int> y{0, kUndefined, 1, kUndefined};
    const auto w = class_balance_weights(y, 2);
    EXPECT_DOUBLE_EQ(w[0], 1.0);
    const std::vector<int> single{1, 1, 1};
    EXPECT_THROW(class_balance_weights(single, 2), DegenerateError);
    const std::vector<int> out_of_range{0, 2};
    EXPECT_THROW(class_balance_weights(out_of_range, 2), DataError);
}

TEST(Join, KeepsEmbeddingOrderAndCountsDrops) {
    EmbeddingSet e;
    e.sample_ids = {"c", "a", "z"};
    e.subject_ids = {"p", "q", "r"};
    e.vectors = Matrix::from_rows({{3}, {1}, {26}});
    LabelSet l;
    l.attributes = {kMetas[0]};
    l.sample_ids = {"a", "b", "c"};
    l.values = {1, 0, 0};
    const auto j = join(e, l);
    EXPECT_EQ(j.data.sample_ids, (std::vector<std::string>{"c", "a"}));
    EXPECT_EQ(j.data.labels.values, (std::vector<int>{0, 1}));
    EXPECT_EQ(j.data.vectors, Matrix::from_rows({{3}, {1}}));
    EXPECT_EQ(j.dropped_embeddings, 1u);
    EXPECT_EQ(j.dropped_labels, 1u);

    const auto sub = j.data.subset({"a"});
    ASSERT_EQ(sub.size(), 1u);
    EXPECT_EQ(sub.subject_ids[0], "q");
    EXPECT_EQ(sub.labels.at(0, 0), 1);
}

}  // namespace
}  // namespace templaudit
