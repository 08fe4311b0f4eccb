#include <gtest/gtest.h>

#include <cmath>

#include "gendebias/pipeline.hpp"
#include "gendebias/training.hpp"
#include "tiny_model.hpp"

using namespace gendebias;

namespace {

// A single-tensor model for driving fit() with scripted losses.
struct Scalar {
    Tensor w = Tensor::parameter({2});
    template <class F>
    void visit_parameters(F &&f) {
        f("w", w);
    }
};

// f(w) = (w0 - 1)^2 + 10 (w1 + 2)^2
Var quadratic(Tape &t, Tensor &w) {
    Var x = t.leaf(w);
    Var d = autograd::sub(x, t.constant(Tensor({2}, {1.0, -2.0})));
    return autograd::sum(autograd::mul(autograd::mul(d, d), t.constant(Tensor({2}, {1.0, 10.0}))));
}

TrainLog scripted_fit(std::vector<double> validation, std::size_t patience, Scalar &m, std::vector<std::vector<double>> *best_params = nullptr) {
    TrainConfig cfg;
    cfg.max_epochs = validation.size();
    cfg.patience = patience;
    cfg.batch_size = 4;
    cfg.learning_rate = 0.1;
    std::size_t epoch = 0;
    return fit<Scalar>(
        m, 8, cfg, [&](Tape &t, std::span<const std::size_t>, std::size_t, std::size_t) { return quadratic(t, m.w); },
        [&] { return validation.at(epoch++); },
        [&](Scalar &s) {
            if (best_params) best_params->push_back(s.w.data);
        });
}

} // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor w = Tensor::parameter({3});
    w.data = {0.5, -1.0, 2.0};
    const auto before = w.data;
    Adam opt(0.1);
    Tensor *p[] = {&w};
    w.grad = std::vector<double>(3, 0.0);
    opt.step(std::span<Tensor *const>(p));
    EXPECT_EQ(w.data, before);
}

TEST(Adam, OneStepDescendsOnSquare) {
    Tensor w = Tensor::parameter({1});
    w.data = {1.0};
    Adam opt(0.01);
    Tape t;
    Var x = t.leaf(w);
    t.backward(autograd::sum(autograd::mul(x, x)));
    Tensor *p[] = {&w};
    opt.step(std::span<Tensor *const>(p));
    EXPECT_LT(w.data[0], 1.0);
    EXPECT_GT(w.data[0], 0.0);
}

TEST(Adam, ReachesTheMinimumOfAConvexQuadratic) {
    Scalar m;
    Adam opt(0.05);
    for (int i = 0; i < 200; ++i) {
        Tape t;
        t.backward(quadratic(t, m.w));
        opt.step(m);
    }
    EXPECT_NEAR(m.w.data[0], 1.0, 1e-3);
    EXPECT_NEAR(m.w.data[1], -2.0, 1e-3);
}

TEST(Adam, WeightDecayShrinksOnZeroGradient) {
    Tensor w = Tensor::parameter({2});
    w.data = {3.0, -4.0};
    Adam opt(0.1, 0.1);
    Tensor *p[] = {&w};
    opt.step(std::span<Tensor *const>(p));
    EXPECT_DOUBLE_EQ(w.data[0], 3.0 * (1 - 0.01));
    EXPECT_DOUBLE_EQ(w.data[1], -4.0 * (1 - 0.01));
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
    Scalar m;
    m.w.grad = std::vector<double>{0.0, std::nan("")};
    Adam opt(0.1);
    try {
        opt.step(m);
        FAIL();
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
    }
}

TEST(WordDropout, Extremes) {
    const auto v = testing_support::tiny_vocab();
    const TokenIds ids{v.label(0), v.id("a"), v.id("b"), v.sep(), v.id("x")};
    Rng rng(1);
    EXPECT_EQ(word_dropout(ids, 0.0, rng, v), ids);
    EXPECT_EQ(word_dropout(ids, 1.0, rng, v), (TokenIds{v.label(0), v.unk(), v.unk(), v.sep(), v.unk()}));
    EXPECT_THROW(word_dropout(ids, 1.5, rng, v), std::invalid_argument);
}

TEST(WordDropout, ReplacementRate) {
    const auto v = testing_support::tiny_vocab();
    TokenIds ids(10000, v.id("a"));
    Rng rng(derive_seed(7, "dropout"));
    const auto out = word_dropout(ids, 0.1, rng, v);
    double replaced = 0;
    for (int id : out) replaced += id == v.unk();
    EXPECT_NEAR(replaced / 10000.0, 0.1, 0.01);
}

TEST(Fit, PatienceZeroStopsAtFirstNonImprovingEpoch) {
    Scalar m;
    const auto log = scripted_fit({0.5, 0.6, 0.6, 0.9, 0.95}, 0, m);
    ASSERT_EQ(log.epochs.size(), 3u);
    EXPECT_TRUE(log.stopped_early);
    EXPECT_EQ(log.best_epoch, 2u);
}

TEST(Fit, PatienceCountsConsecutiveFailures) {
    Scalar m;
    const auto log = scripted_fit({0.5, 0.4, 0.6, 0.5, 0.5, 0.5, 0.9}, 2, m);
    EXPECT_EQ(log.epochs.size(), 6u);
    EXPECT_EQ(log.best_epoch, 3u);
    EXPECT_DOUBLE_EQ(log.best_validation, 0.6);
}

TEST(Fit, RestoresTheBestEpoch) {
    Scalar m;
    std::vector<std::vector<double>> best;
    const auto log = scripted_fit({0.2, 0.7, 0.3, 0.1, 0.65, 0.5}, 10, m, &best);
    EXPECT_EQ(log.best_epoch, 2u);
    ASSERT_EQ(best.size(), 2u);
    EXPECT_EQ(m.w.data, best.back());
    for (const auto &e : log.epochs) EXPECT_LE(e.validation, log.best_validation);
}

TEST(Fit, DivergenceNamesTheEpoch) {
    Scalar m;
    TrainConfig cfg;
    cfg.max_epochs = 3;
    try {
        fit<Scalar>(
            m, 4, cfg,
            [&](Tape &t, std::span<const std::size_t>, std::size_t epoch, std::size_t) {
                return epoch == 2 ? autograd::log_sum_exp(t.constant(Tensor({1}, {std::nan("")}))) : quadratic(t, m.w);
            },
            [] { return 0.0; });
        FAIL();
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("epoch 2"), std::string::npos) << e.what();
    }
}

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig c;
    EXPECT_EQ(c.learning_rate, 3e-4);
    EXPECT_EQ(c.max_epochs, 30u);
    EXPECT_EQ(c.patience, 3u);
    EXPECT_EQ(c.batch_size, 64u);
    const auto f = c.finetune();
    EXPECT_EQ(f.learning_rate, 1.5e-4);
    EXPECT_EQ(f.max_epochs, 5u);
    EXPECT_EQ(f.word_dropout, 0.1);
    EXPECT_EQ(f.weight_decay, 0.1);
    EXPECT_EQ(f.objective, Objective::FinetuneBayes);
    TrainConfig g;
    g.update_from_json(nlohmann::json::parse(f.to_json().dump()));
    EXPECT_EQ(g.to_json(), f.to_json());
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.word_dropout = 2.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_THROW(parse_objective("sgd"), std::invalid_argument);
}

namespace {

struct SmokeRun {
    double initial = 0.0, final = 0.0;
    TrainLog log;
    std::vector<std::vector<double>> params;
};

SmokeRun smoke_run(std::size_t epochs) {
    CorpusSpec spec;
    spec.examples_per_label = 167;
    spec.seed = 3;
    const auto data = generate_corpus(spec);
    const auto vocab = corpus_vocabulary({&data});
    const auto splits = split_all(data, SplitKind::HypothesisOnly);
    nn::ModelConfig mc = testing_support::tiny_config(32);
    mc.d_model = 16;
    mc.ff_width = 32;
    SeqModel m(vocab, output_vocabulary(vocab, splits), mc, 5);
    std::vector<ConditionedInput> all;
    for (const auto &s : splits) all.push_back(m.condition(s, s.label));
    auto mean_nll = [&] {
        Tape t;
        return m.nll_loss(t, all).item();
    };
    SmokeRun r;
    r.initial = mean_nll();
    TrainConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.max_epochs = epochs;
    cfg.patience = epochs;
    cfg.seed = 9;
    r.log = train_generative(m, splits, std::span<const BiasSplit>(splits).first(60), cfg, Prior::uniform(3));
    r.final = mean_nll();
    r.params = snapshot(m);
    return r;
}

} // namespace

// Threshold fixed after a pilot run: mean NLL 4.21 -> 2.57 after four epochs.
TEST(Fit, GenerativeSmokeTrainingReducesLoss) {
    const auto r = smoke_run(4);
    EXPECT_LT(r.final, 0.7 * r.initial) << r.initial << " -> " << r.final;
}

TEST(Fit, DeterministicGivenSeed) {
    const auto a = smoke_run(2), b = smoke_run(2);
    EXPECT_EQ(a.log, b.log);
    EXPECT_EQ(a.params, b.params);
}

TEST(TrainClassifier, LearnsTheInjectedToken) {
    CorpusSpec spec;
    spec.examples_per_label = 100;
    const auto clean = generate_corpus(spec);
    const auto biased = inject_synthetic_bias(clean, {1.0, {}, 4});
    const auto vocab = corpus_vocabulary({&clean});
    EncoderClassifier c(ClassifierKind::BiasOnly, SplitKind::HypothesisOnly, vocab, testing_support::tiny_config(32), 1);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.max_epochs = 5;
    cfg.seed = 2;
    train_classifier(c, biased, biased, cfg);
    EXPECT_GE(accuracy(records_for(biased, c.predict(biased))), 0.99);
    c.freeze();
    EXPECT_THROW(train_classifier(c, biased, biased, cfg), std::invalid_argument);
}
