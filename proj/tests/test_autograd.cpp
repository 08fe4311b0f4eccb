#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gendebias/autograd.hpp"
#include "gendebias/nn.hpp"
#include "support.hpp"

using namespace gendebias;
using namespace gendebias::autograd;
using testing_support::fd_relative_error;
using testing_support::random_tensor;

namespace {

constexpr double kTol = 1e-4;

// Weighted sum so that every output element carries a distinct gradient.
Var probe(Var y, std::uint64_t seed = 99) {
    Rng rng(seed);
    Tensor w = random_tensor(y.shape(), rng);
    return sum(mul(y, y.tape().constant(std::move(w))));
}

} // namespace

TEST(Tensor, RejectsMismatchedData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    EXPECT_THROW(Tensor({0, 3}), ShapeError);
    Tensor t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.grad.has_value());
}

TEST(Forward, MatmulIdentity) {
    Tape t;
    Var a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Var i = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    EXPECT_EQ(matmul(a, i).value().data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Forward, LogSumExpOfZeros) {
    Tape t;
    Var x = t.constant(Tensor({3}, {0, 0, 0}));
    EXPECT_NEAR(log_sum_exp(x).item(), std::log(3.0), 1e-15);
}

TEST(Forward, SoftmaxIsStableForLargeLogits) {
    Tape t;
    Var x = t.constant(Tensor({1, 2}, {1000, 1000}));
    const auto p = softmax(x).value().data;
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
    const auto lp = log_softmax(x).value().data;
    EXPECT_NEAR(lp[0], std::log(0.5), 1e-15);
}

TEST(Forward, SoftmaxRowsSumToOne) {
    Rng rng(3);
    Tape t;
    Var x = t.constant(random_tensor({7, 11}, rng, 30.0));
    const auto p = softmax(x).value();
    for (std::size_t r = 0; r < 7; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 11; ++c) {
            EXPECT_GE(p.at(r, c), 0.0);
            s += p.at(r, c);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Forward, ShapeErrorsNameThePrimitive) {
    Tape t;
    Var a = t.constant(Tensor({2, 3}));
    Var b = t.constant(Tensor({2, 3}));
    try {
        matmul(a, b);
        FAIL() << "expected a shape error";
    } catch (const ShapeError &e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    }
    EXPECT_THROW(add(a, t.constant(Tensor({3, 2}))), ShapeError);
    EXPECT_THROW(add_bias(a, t.constant(Tensor({2}))), ShapeError);
}

TEST(Backward, SquareHasGradientTwoX) {
    Tensor x = Tensor::parameter({1}, 3.0);
    Tape t;
    Var v = t.leaf(x);
    t.backward(sum(mul(v, v)));
    ASSERT_TRUE(x.grad.has_value());
    EXPECT_DOUBLE_EQ((*x.grad)[0], 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
    Rng rng(1);
    Tensor z = random_tensor({1, 5}, rng);
    z.requires_grad = true;
    Tape t;
    t.backward(sum(softmax(t.leaf(z))));
    for (double g : *z.grad) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, RejectsNonScalarLoss) {
    Tensor x = Tensor::parameter({2}, 1.0);
    Tape t;
    EXPECT_THROW(t.backward(t.leaf(x)), ShapeError);
}

TEST(Backward, RejectsLossWithoutTrainableInputs) {
    Tape t;
    Var c = t.constant(Tensor({2}, {1, 2}));
    EXPECT_THROW(t.backward(sum(c)), std::logic_error);
}

TEST(Backward, FanOutAccumulatesBothBranches) {
    Tensor x = Tensor::parameter({2}, 0.0);
    x.data = {1.5, -2.0};
    Tape t;
    Var v = t.leaf(x);
    // d/dx [sum(3x) + sum(x*x)] = 3 + 2x
    t.backward(add(sum(scale(v, 3.0)), sum(mul(v, v))));
    EXPECT_DOUBLE_EQ((*x.grad)[0], 3.0 + 3.0);
    EXPECT_DOUBLE_EQ((*x.grad)[1], 3.0 - 4.0);
}

TEST(Backward, EveryTrainableLeafReceivesAGradient) {
    Tensor a = Tensor::parameter({2, 2}, 1.0);
    Tensor b = Tensor::parameter({2}, 0.5);
    Tape t;
    t.backward(sum(add_bias(t.leaf(a), t.leaf(b))));
    EXPECT_TRUE(a.grad.has_value());
    EXPECT_TRUE(b.grad.has_value());
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per primitive.

class Gradients : public ::testing::Test {
  protected:
    Rng rng{2024};
    Tensor rand(Shape s, double scale = 1.0) { return random_tensor(std::move(s), rng, scale); }
};

TEST_F(Gradients, Matmul) {
    Tensor a = rand({3, 4}), b = rand({4, 2});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(matmul(t.leaf(a), t.leaf(b))); }, {&a, &b}), kTol);
}

TEST_F(Gradients, Transpose) {
    Tensor a = rand({3, 4});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(transpose(t.leaf(a))); }, {&a}), kTol);
}

TEST_F(Gradients, AddSubMulScale) {
    Tensor a = rand({3, 4}), b = rand({3, 4});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(add(t.leaf(a), t.leaf(b))); }, {&a, &b}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(sub(t.leaf(a), t.leaf(b))); }, {&a, &b}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(mul(t.leaf(a), t.leaf(b))); }, {&a, &b}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(scale(t.leaf(a), -1.7)); }, {&a}), kTol);
}

TEST_F(Gradients, AddBias) {
    Tensor x = rand({5, 3}), b = rand({3});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(add_bias(t.leaf(x), t.leaf(b))); }, {&x, &b}), kTol);
}

TEST_F(Gradients, ReluAwayFromKink) {
    Tensor x = rand({4, 5});
    for (auto &v : x.data)
        if (std::abs(v) < 0.05) v = 0.3;
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(relu(t.leaf(x))); }, {&x}), kTol);
}

TEST_F(Gradients, Gelu) {
    Tensor x = rand({4, 5}, 3.0);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(gelu(t.leaf(x))); }, {&x}), kTol);
}

TEST_F(Gradients, SoftmaxAndLogSoftmax) {
    Tensor x = rand({3, 6}, 4.0);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(softmax(t.leaf(x))); }, {&x}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(log_softmax(t.leaf(x))); }, {&x}), kTol);
}

TEST_F(Gradients, LogSumExp) {
    Tensor x = rand({3, 6}, 4.0), v = rand({6}, 4.0);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(log_sum_exp(t.leaf(x))); }, {&x}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return log_sum_exp(t.leaf(v)); }, {&v}), kTol);
}

TEST_F(Gradients, LayerNorm) {
    Tensor x = rand({4, 6}, 2.0), g = rand({6}), b = rand({6});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(layer_norm(t.leaf(x), t.leaf(g), t.leaf(b))); }, {&x, &g, &b}),
              kTol);
}

TEST_F(Gradients, Embedding) {
    Tensor table = rand({5, 3});
    const std::vector<int> ids{4, 0, 4, 2};
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(embedding(t.leaf(table), ids)); }, {&table}), kTol);
}

TEST_F(Gradients, ConcatBothAxes) {
    Tensor a = rand({2, 3}), b = rand({4, 3}), c = rand({2, 5});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(concat({t.leaf(a), t.leaf(b)}, 0)); }, {&a, &b}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(concat({t.leaf(a), t.leaf(c)}, 1)); }, {&a, &c}), kTol);
}

TEST_F(Gradients, SliceAndReshape) {
    Tensor a = rand({5, 3});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(slice_rows(t.leaf(a), 1, 3)); }, {&a}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(reshape(t.leaf(a), {3, 5})); }, {&a}), kTol);
}

TEST_F(Gradients, Reductions) {
    Tensor a = rand({4, 3});
    EXPECT_LT(fd_relative_error([&](Tape &t) { return sum(mul(t.leaf(a), t.leaf(a))); }, {&a}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return mean(mul(t.leaf(a), t.leaf(a))); }, {&a}), kTol);
}

TEST_F(Gradients, PickAndCrossEntropy) {
    Tensor x = rand({4, 5}, 3.0);
    const std::vector<int> targets{1, 4, 0, 1};
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(pick(t.leaf(x), targets)); }, {&x}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return cross_entropy(t.leaf(x), targets); }, {&x}), kTol);
}

TEST_F(Gradients, Segments) {
    Tensor x = rand({6, 3}), v = rand({6});
    const std::vector<std::size_t> off{0, 2, 3, 6};
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(segment_sum(t.leaf(x), off)); }, {&x}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(segment_mean(t.leaf(x), off)); }, {&x}), kTol);
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(segment_sum(t.leaf(v), off)); }, {&v}), kTol);
}

TEST_F(Gradients, AttentionCausalAndCross) {
    Tensor q = rand({5, 4}), k = rand({7, 4}), v = rand({7, 4});
    const std::vector<AttentionSegment> cross{{0, 2, 0, 3}, {2, 3, 3, 4}};
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(attention(t.leaf(q), t.leaf(k), t.leaf(v), 2, cross, false)); },
                                {&q, &k, &v}),
              kTol);
    Tensor s = rand({5, 4}), sk = rand({5, 4}), sv = rand({5, 4});
    const std::vector<AttentionSegment> self{{0, 2, 0, 2}, {2, 3, 2, 3}};
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(attention(t.leaf(s), t.leaf(sk), t.leaf(sv), 2, self, true)); },
                                {&s, &sk, &sv}),
              kTol);
}

TEST_F(Gradients, AttentionWithDistancePenalty) {
    Tensor s = rand({6, 4}), sk = rand({6, 4}), sv = rand({6, 4});
    const std::vector<AttentionSegment> self{{0, 2, 0, 2}, {2, 4, 2, 4}};
    const std::vector<double> slopes{0.5, 0.125};
    EXPECT_LT(fd_relative_error([&](Tape &t) { return probe(attention(t.leaf(s), t.leaf(sk), t.leaf(sv), 2, self, false, slopes)); },
                                {&s, &sk, &sv}),
              kTol);
}

TEST(Attention, DistancePenaltyIsTranslationInvariant) {
    Rng rng(9);
    Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
    // The same sequence packed alone and behind another one gives identical rows.
    Tensor q2({5, 4}), k2({5, 4}), v2({5, 4});
    for (std::size_t i = 0; i < 8; ++i) q2.data[i] = k2.data[i] = v2.data[i] = 0.3 * static_cast<double>(i);
    std::copy(q.data.begin(), q.data.end(), q2.data.begin() + 8);
    std::copy(k.data.begin(), k.data.end(), k2.data.begin() + 8);
    std::copy(v.data.begin(), v.data.end(), v2.data.begin() + 8);
    const std::vector<double> slopes{1.0, 0.25};
    const std::vector<AttentionSegment> one{{0, 3, 0, 3}}, two{{0, 2, 0, 2}, {2, 3, 2, 3}};
    Tape t;
    const auto a = attention(t.constant(q), t.constant(k), t.constant(v), 2, one, false, slopes).value();
    const auto b = attention(t.constant(q2), t.constant(k2), t.constant(v2), 2, two, false, slopes).value();
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(a.data[i], b.data[i + 8], 1e-15);
    const auto c = attention(t.constant(q), t.constant(k), t.constant(v), 2, one, false).value();
    EXPECT_NE(a.data, c.data);
    EXPECT_THROW(attention(t.constant(q), t.constant(k), t.constant(v), 2, one, false, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Attention, CausalMaskHidesTheFuture) {
    Rng rng(8);
    Tensor q = random_tensor({4, 4}, rng), k = random_tensor({4, 4}, rng), v = random_tensor({4, 4}, rng);
    const std::vector<AttentionSegment> seg{{0, 4, 0, 4}};
    Tape t1;
    const auto a = attention(t1.constant(q), t1.constant(k), t1.constant(v), 2, seg, true).value();
    k.data[12] += 5.0;
    v.data[13] -= 3.0;
    Tape t2;
    const auto b = attention(t2.constant(q), t2.constant(k), t2.constant(v), 2, seg, true).value();
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a.data[i], b.data[i]);
}

TEST(Gradients3LayerMlp, MatchesFiniteDifferences) {
    Rng rng(17);
    Tensor x = random_tensor({6, 5}, rng);
    Tensor w1 = nn::xavier(5, 8, rng), b1 = random_tensor({8}, rng, 0.1);
    Tensor w2 = nn::xavier(8, 8, rng), b2 = random_tensor({8}, rng, 0.1);
    Tensor w3 = nn::xavier(8, 3, rng), b3 = random_tensor({3}, rng, 0.1);
    const std::vector<int> y{0, 1, 2, 2, 1, 0};
    auto loss = [&](Tape &t) {
        Var h = gelu(add_bias(matmul(t.constant(x), t.leaf(w1)), t.leaf(b1)));
        h = gelu(add_bias(matmul(h, t.leaf(w2)), t.leaf(b2)));
        return cross_entropy(add_bias(matmul(h, t.leaf(w3)), t.leaf(b3)), y);
    };
    EXPECT_LT(fd_relative_error(loss, {&w1, &b1, &w2, &b2, &w3, &b3}), kTol);
}

TEST(TransformerGradients, MatchFiniteDifferences) {
    Rng rng(5);
    nn::ModelConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.ff_width = 12;
    c.max_len = 6;
    auto enc = nn::EncoderLayer::init(c, rng);
    auto dec = nn::DecoderLayer::init(c, rng);
    Tensor x = random_tensor({5, 8}, rng), y = random_tensor({4, 8}, rng);
    const std::vector<AttentionSegment> es{{0, 2, 0, 2}, {2, 3, 2, 3}}, ds{{0, 1, 0, 1}, {1, 3, 1, 3}},
        cs{{0, 1, 0, 2}, {1, 3, 2, 3}};
    std::vector<Tensor *> params;
    enc.visit("e", [&](const std::string &, Tensor &p) { params.push_back(&p); });
    dec.visit("d", [&](const std::string &, Tensor &p) { params.push_back(&p); });
    auto loss = [&](Tape &t) {
        Var m = enc(t, t.constant(x), 2, es);
        return probe(dec(t, t.constant(y), m, 2, ds, cs));
    };
    EXPECT_LT(fd_relative_error(loss, params), kTol);
}
