#include <gtest/gtest.h>

#include <algorithm>

#include "gendebias/metrics.hpp"
#include "gendebias/random.hpp"

using namespace gendebias;

namespace {

Predictions records(const std::vector<std::size_t> &gold, const std::vector<std::size_t> &pred) {
    Predictions out;
    for (std::size_t i = 0; i < gold.size(); ++i) out.push_back({"x" + std::to_string(i), gold[i], pred[i], {}});
    return out;
}

std::vector<Tokens> sentences(std::initializer_list<const char *> s) {
    std::vector<Tokens> out;
    for (const char *x : s) out.push_back(tokenize(x));
    return out;
}

} // namespace

TEST(Accuracy, Counts) {
    EXPECT_EQ(accuracy(records({0, 1, 2}, {0, 1, 2})), 1.0);
    EXPECT_EQ(accuracy(records({0, 1, 2}, {1, 2, 0})), 0.0);
    EXPECT_EQ(accuracy(records({0, 1, 2, 0}, {0, 1, 0, 1})), 0.5);
    EXPECT_THROW(accuracy(Predictions{}), std::invalid_argument);
}

TEST(Accuracy, UniformRandomPredictorIsAtChance) {
    Rng rng(11);
    std::vector<std::size_t> gold, pred;
    for (int i = 0; i < 10000; ++i) {
        gold.push_back(static_cast<std::size_t>(i % 3));
        pred.push_back(uniform_index(rng, 3));
    }
    EXPECT_NEAR(accuracy(records(gold, pred)), 1.0 / 3.0, 0.02);
}

TEST(Delta, TableValues) {
    EXPECT_NEAR(delta(65.86, 66.74), -0.88, 1e-12);
    EXPECT_NEAR(delta(90.49, 80.55), 9.94, 1e-12);
    EXPECT_EQ(delta(0.7, 0.7), 0.0);
    EXPECT_EQ(delta(0.9, 0.6), -delta(0.6, 0.9));
}

TEST(Rho, PerfectAndOpposite) {
    const auto a = records({0, 1, 2, 0, 1}, {0, 1, 2, 2, 1});
    EXPECT_DOUBLE_EQ(rho(a, a), 1.0);
    const auto p = records({0, 0, 0, 0}, {0, 1, 0, 1});
    const auto q = records({0, 0, 0, 0}, {1, 0, 1, 0});
    EXPECT_DOUBLE_EQ(rho(p, q), -1.0);
}

TEST(Rho, ConstantSequenceGivesZero) {
    const auto a = records({0, 1, 2}, {1, 1, 1});
    const auto b = records({0, 1, 2}, {0, 1, 2});
    EXPECT_EQ(rho(a, b), 0.0);
    EXPECT_EQ(rho(b, a), 0.0);
}

TEST(Rho, IndependentUniformPredictionsAreUncorrelated) {
    Rng rng(2026);
    std::vector<std::size_t> g(10000, 0), a, b;
    for (int i = 0; i < 10000; ++i) {
        a.push_back(uniform_index(rng, 3));
        b.push_back(uniform_index(rng, 3));
    }
    EXPECT_LT(std::abs(rho(records(g, a), records(g, b))), 0.05);
}

TEST(Rho, SymmetricAndRelabelingInvariant) {
    Rng rng(4);
    std::vector<std::size_t> g(300, 0), a, b, pa, pb;
    const std::size_t perm[3] = {2, 0, 1};
    for (int i = 0; i < 300; ++i) {
        a.push_back(uniform_index(rng, 3));
        b.push_back(uniform01(rng) < 0.6 ? a.back() : uniform_index(rng, 3));
        pa.push_back(perm[a.back()]);
        pb.push_back(perm[b.back()]);
    }
    const double r = rho(records(g, a), records(g, b));
    EXPECT_NEAR(r, rho(records(g, b), records(g, a)), 1e-12);
    EXPECT_NEAR(r, rho(records(g, pa), records(g, pb)), 1e-12);
    EXPECT_GT(r, 0.3);
}

TEST(Rho, AlignsById) {
    Predictions a{{"p", 0, 0, {}}, {"q", 0, 1, {}}, {"r", 0, 2, {}}};
    Predictions b{{"r", 0, 2, {}}, {"p", 0, 0, {}}, {"q", 0, 1, {}}};
    EXPECT_DOUBLE_EQ(rho(a, b), 1.0);
    Predictions c{{"r", 0, 2, {}}, {"p", 0, 0, {}}, {"z", 0, 1, {}}};
    EXPECT_THROW(rho(a, c), std::invalid_argument);
}

TEST(Bleu, IdenticalCorpusScoresOne) {
    const auto c = sentences({"e1 has color red .", "a b", "x"});
    EXPECT_DOUBLE_EQ(bleu(c, c), 1.0);
}

TEST(Bleu, NoSharedUnigramScoresZero) {
    EXPECT_EQ(bleu(sentences({"a b c"}), sentences({"d e f"})), 0.0);
}

TEST(Bleu, EmptyCandidateSetIsAnError) {
    EXPECT_THROW(bleu(std::vector<Tokens>{}, std::vector<Tokens>{}), std::invalid_argument);
}

// Values frozen from tests/oracles/bleu_oracle.py.
TEST(Bleu, MatchesOracle) {
    EXPECT_NEAR(bleu(sentences({"a b c d e"}), sentences({"a b c d f"})), 0.75212061861727875, 1e-9);
    EXPECT_NEAR(bleu(sentences({"the cat sat"}), sentences({"the cat sat on the mat"})), 0.36787944117144233, 1e-9);
    const std::vector<std::vector<Tokens>> multi{sentences({"the cat sat on the mat", "there is a cat on the mat"})};
    EXPECT_NEAR(bleu(sentences({"the cat is on the mat"}), multi), 0.50813274815461473, 1e-9);
    EXPECT_NEAR(bleu(sentences({"e1 has color red . e2 has size big .", "e3 has mood calm ."}),
                     sentences({"e1 has color red . e4 has size big .", "e3 has mood happy . e5 has age old ."})),
                0.44173354787177616, 1e-9);
    EXPECT_NEAR(bleu(sentences({"the the the the"}), sentences({"the cat the mat"})), 0.37991784282579627, 1e-9);
}

TEST(Bleu, CorpusOrderInvariant) {
    auto c = sentences({"e1 has color red .", "e3 has mood calm .", "a b c"});
    auto r = sentences({"e1 has color blue .", "e3 has mood calm . e2", "a b d"});
    const double v = bleu(c, r);
    std::reverse(c.begin(), c.end());
    std::reverse(r.begin(), r.end());
    EXPECT_DOUBLE_EQ(bleu(c, r), v);
}

TEST(SelfBleu, MatchesOracle) {
    EXPECT_NEAR(self_bleu(sentences({"a b c d", "a b c e", "x y z w"})), 0.43869133765083079, 1e-9);
    EXPECT_NEAR(self_bleu(sentences({"e1 has color red .", "e2 has color red .", "e1 has size big ."})), 0.65635911439321093, 1e-9);
}

TEST(SelfBleu, Extremes) {
    EXPECT_DOUBLE_EQ(self_bleu(sentences({"a b c", "a b c", "a b c"})), 1.0);
    EXPECT_EQ(self_bleu(sentences({"a b", "c d", "e f"})), 0.0);
    EXPECT_THROW(self_bleu(sentences({"a b"})), std::invalid_argument);
}

TEST(SelfBleu, OrderInvariant) {
    auto c = sentences({"a b c d", "a b c e", "x y z w", "a x c"});
    const double v = self_bleu(c);
    std::rotate(c.begin(), c.begin() + 1, c.end());
    EXPECT_NEAR(self_bleu(c), v, 1e-15);
}

TEST(Report, DeltaIsConsistentWithAccuracies) {
    MetricsReport r;
    r.set_pair(0.8766666666666667, 0.5433333333333333);
    EXPECT_EQ(*r.delta, *r.accuracy_test - *r.accuracy_hard);
    const auto j = r.to_json();
    EXPECT_EQ(j["delta"].get<double>(), j["accuracy_test"].get<double>() - j["accuracy_hard"].get<double>());
    EXPECT_NE(r.to_text().find("87.67"), std::string::npos);
}

TEST(Report, PredictionsRoundTrip) {
    Predictions p{{"a", 0, 2, {0.25, 0.25, 0.5}}, {"b", 1, 1, {}}};
    const std::string path = ::testing::TempDir() + "/preds.jsonl";
    {
        std::ofstream out(path);
        out << predictions_jsonl(p);
    }
    EXPECT_EQ(read_predictions(path), p);
}
