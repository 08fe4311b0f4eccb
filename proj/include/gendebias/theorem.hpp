#pragma once

// Exact checks on enumerable models: the implied bias of a generative
// classifier equals its prior, and p(R | y, B) sums to one over every
// terminated remainder.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/bayes.hpp"
#include "gendebias/random.hpp"
#include "gendebias/seq2seq.hpp"
#include "gendebias/training.hpp"

namespace gendebias {

/// Vocabulary {a, b, c, x, y}; the output vocabulary is {EOS, UNK, a, b}.
inline Vocabulary enumerable_vocab(const LabelSet &labels = {}) {
    return Vocabulary::build(labels, std::vector<Tokens>{{"a", "b", "c", "x", "y"}});
}

inline nn::ModelConfig enumerable_config(std::size_t max_len = 5) {
    nn::ModelConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.ff_width = 16;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.max_len = max_len;
    return c;
}

/// A random parameter setting. The output layer is rescaled and given random
/// biases so that next-token distributions are far from uniform.
inline SeqModel random_enumerable_model(std::uint64_t seed, double output_scale = 3.0, std::size_t max_len = 5) {
    const auto v = enumerable_vocab();
    SeqModel m(v, {v.eos(), v.unk(), v.id("a"), v.id("b")}, enumerable_config(max_len), seed);
    for (auto &w : m.output_layer().weight.data) w *= output_scale;
    Rng rng(derive_seed(seed, "enumerable-output-bias"));
    for (auto &b : m.output_layer().bias.data) b = 2.0 * uniform01(rng) - 1.0;
    return m;
}

/// Distinct bias inputs over {x, y, c, a}, shortest first, at most 3 tokens.
inline std::vector<Tokens> enumerable_bias_suite(std::size_t count) {
    const std::vector<std::string> alphabet{"x", "y", "c", "a"};
    std::vector<Tokens> out;
    for (std::size_t len = 1; len <= 3 && out.size() < count; ++len) {
        std::size_t total = 1;
        for (std::size_t i = 0; i < len; ++i) total *= alphabet.size();
        for (std::size_t code = 0; code < total && out.size() < count; ++code) {
            Tokens b;
            for (std::size_t i = 0, c = code; i < len; ++i, c /= alphabet.size()) b.push_back(alphabet[c % alphabet.size()]);
            out.push_back(b);
        }
    }
    return out;
}

/// An enumerable model fitted to a label-dependent toy distribution over R.
inline SeqModel trained_enumerable_model(std::uint64_t seed, std::size_t epochs = 40) {
    SeqModel m = random_enumerable_model(seed, 1.0);
    const std::vector<Tokens> by_label{{"a"}, {"b", "b"}, {"a", "b", "a"}};
    const auto bias = enumerable_bias_suite(12);
    Rng rng(derive_seed(seed, "enumerable-data"));
    std::vector<BiasSplit> data;
    for (std::size_t i = 0; i < 240; ++i) {
        const std::size_t y = i % 3;
        BiasSplit s;
        s.bias = bias[uniform_index(rng, bias.size())];
        s.remainder = uniform01(rng) < 0.8 ? by_label[y] : by_label[uniform_index(rng, 3)];
        s.label = y;
        data.push_back(s);
    }
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.max_epochs = epochs;
    cfg.batch_size = 32;
    cfg.patience = epochs;
    cfg.seed = seed;
    train_generative(m, data, std::span<const BiasSplit>(data).first(30), cfg, Prior::uniform(m.num_labels()));
    return m;
}

/// max over B and y of |implied_bias(B)[y] - p(y | B)|.
inline double implied_bias_deviation(SeqModel &model, const Prior &prior, std::span<const Tokens> bias_inputs, double bound = 1e7) {
    double worst = 0.0;
    for (const auto &b : bias_inputs) {
        const auto implied = implied_bias(model, prior, b, bound);
        const auto lp = prior.log_probs_for_bias(b);
        for (std::size_t y = 0; y < implied.size(); ++y) worst = std::max(worst, std::abs(implied[y] - std::exp(lp[y])));
    }
    return worst;
}

/// max over B and y of |Σ_R p(R | y, B) - 1|, R ranging over every terminated remainder.
inline double normalization_deviation(SeqModel &model, std::span<const Tokens> bias_inputs, double bound = 1e7) {
    if (enumeration_size(model.output_size(), model.max_remainder_len(), bound) == 0) {
        throw std::length_error("normalization check: enumeration bound exceeded");
    }
    double worst = 0.0;
    for (const auto &b : bias_inputs) {
        const TokenIds ids = model.vocab().encode(b);
        for (std::size_t y = 0; y < model.num_labels(); ++y) {
            std::vector<ConditionedInput> in;
            for_each_remainder(model, model.max_remainder_len(), [&](std::span<const int> r) { in.push_back(model.condition_ids(ids, y, r)); });
            double total = 0.0;
            for (double s : model.score_batch(in, 1024)) total += std::exp(s);
            worst = std::max(worst, std::abs(total - 1.0));
        }
    }
    return worst;
}

struct TheoremReport {
    std::string prior;
    std::size_t bias_inputs = 0;
    double tolerance = 1e-6;
    std::vector<std::pair<std::string, double>> models; // name, max deviation
    double max_deviation = 0.0;
    bool passed = false;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json m = nlohmann::ordered_json::array();
        for (const auto &[name, dev] : models) m.push_back({{"model", name}, {"max_deviation", dev}});
        return {{"prior", prior},   {"bias_inputs", bias_inputs}, {"tolerance", tolerance},
                {"models", m},      {"max_deviation", max_deviation}, {"passed", passed}};
    }
};

} // namespace gendebias
