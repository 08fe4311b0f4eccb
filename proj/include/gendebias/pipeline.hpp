#pragma once

// End-to-end synthetic experiments: corpus generation, bias injection,
// discriminative and generative training, evaluation on the biased,
// re-randomized and stripped hard sets, and fine-tuning with a learned prior.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/bayes.hpp"
#include "gendebias/classifier.hpp"
#include "gendebias/dataset.hpp"
#include "gendebias/metrics.hpp"
#include "gendebias/seq2seq.hpp"
#include "gendebias/training.hpp"

namespace gendebias {

using Logger = std::function<void(const std::string &)>;

/// Desk-scale encoder-decoder: one layer each side, width 64, distance-penalized
/// encoder attention so that removing a prefix token does not shift the rest.
inline nn::ModelConfig desk_model_config() {
    nn::ModelConfig c;
    c.d_model = 64;
    c.heads = 4;
    c.ff_width = 128;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.max_len = 32;
    c.encoder_positions = nn::PositionMode::Distance;
    return c;
}

/// Fields present in `j` override the current values.
inline void update_model_config(nn::ModelConfig &c, const nlohmann::json &j) {
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.ff_width = j.value("ff_width", c.ff_width);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.max_len = j.value("max_len", c.max_len);
    if (j.contains("encoder_positions")) c.encoder_positions = nn::parse_position_mode(j.at("encoder_positions").get<std::string>());
    c.validate();
}

struct ExperimentConfig {
    CorpusSpec corpus{.lexicon = HypothesisLexicon::Paraphrase};
    std::size_t dev_per_label = 300;
    std::size_t test_per_label = 500;
    SplitKind split = SplitKind::HypothesisOnly;
    nn::ModelConfig generative = desk_model_config();
    nn::ModelConfig classifier = desk_model_config();
    // Generative runs keep going past the first validation plateau: the
    // stripped-label accuracy is noisy from epoch to epoch and the best epoch
    // is restored anyway.
    TrainConfig train{.patience = 30, .weight_decay = 0.1};
    TrainConfig classifier_train{.objective = Objective::DiscriminativeCe};
    TrainConfig finetune = train.finetune();

    nlohmann::ordered_json to_json() const {
        return {{"corpus",
                 {{"entities", corpus.entities},
                  {"attribute_types", corpus.attribute_types},
                  {"values_per_type", corpus.values_per_type},
                  {"examples_per_label", corpus.examples_per_label},
                  {"assertions_per_premise", corpus.assertions_per_premise},
                  {"lexicon", to_string(corpus.lexicon)}}},
                {"dev_per_label", dev_per_label},
                {"test_per_label", test_per_label},
                {"split", to_string(split)},
                {"generative", gendebias::to_json(generative)},
                {"classifier", gendebias::to_json(classifier)},
                {"train", train.to_json()},
                {"classifier_train", classifier_train.to_json()},
                {"finetune", finetune.to_json()}};
    }

    /// Fields present in `j` override the current values. A "train" section
    /// without a "finetune" section re-derives the fine-tuning phase from it.
    void update_from_json(const nlohmann::json &j) {
        if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
        if (j.contains("corpus")) {
            const auto &c = j.at("corpus");
            corpus.entities = c.value("entities", corpus.entities);
            corpus.attribute_types = c.value("attribute_types", corpus.attribute_types);
            corpus.values_per_type = c.value("values_per_type", corpus.values_per_type);
            corpus.examples_per_label = c.value("examples_per_label", corpus.examples_per_label);
            corpus.assertions_per_premise = c.value("assertions_per_premise", corpus.assertions_per_premise);
            if (c.contains("lexicon")) corpus.lexicon = parse_lexicon(c.at("lexicon").get<std::string>());
        }
        dev_per_label = j.value("dev_per_label", dev_per_label);
        test_per_label = j.value("test_per_label", test_per_label);
        if (j.contains("split")) split = parse_split_kind(j.at("split").get<std::string>());
        if (j.contains("generative")) update_model_config(generative, j.at("generative"));
        if (j.contains("classifier")) update_model_config(classifier, j.at("classifier"));
        if (j.contains("train")) {
            train.update_from_json(j.at("train"));
            finetune = train.finetune();
        }
        if (j.contains("classifier_train")) classifier_train.update_from_json(j.at("classifier_train"));
        if (j.contains("finetune")) finetune.update_from_json(j.at("finetune"));
    }
};

/// Bias-free train/dev/test corpora of one seed.
struct SyntheticData {
    Dataset train, dev, test;
};

inline SyntheticData make_synthetic_data(const ExperimentConfig &cfg, std::uint64_t seed) {
    auto part = [&](const char *name, std::size_t per_label) {
        CorpusSpec s = cfg.corpus;
        s.examples_per_label = per_label;
        s.seed = derive_seed(seed, std::string("corpus:") + name);
        s.id_prefix = name;
        return generate_corpus(s);
    };
    return {part("train", cfg.corpus.examples_per_label), part("dev", cfg.dev_per_label), part("test", cfg.test_per_label)};
}

/// The datasets of one bias ratio.
struct BiasedData {
    SyntheticBiasConfig bias;
    Dataset train, dev;
    Dataset test_biased;   // same ratio as training
    Dataset test_random;   // bias tokens re-drawn uniformly
    Dataset test_stripped; // bias tokens removed
};

inline BiasedData inject_all(const SyntheticData &data, double ratio, std::uint64_t seed) {
    BiasedData out;
    out.bias.ratio = ratio;
    out.bias.seed = derive_seed(seed, "inject");
    out.train = inject_synthetic_bias(data.train, out.bias);
    out.dev = inject_synthetic_bias(data.dev, out.bias);
    out.test_biased = inject_synthetic_bias(data.test, out.bias);
    out.test_random = rerandomize_bias_tokens(out.test_biased, out.bias);
    out.test_stripped = strip_bias_tokens(out.test_biased, out.bias);
    return out;
}

inline Vocabulary corpus_vocabulary(std::initializer_list<const Dataset *> sets, const LabelSet &labels = {}) {
    std::vector<Tokens> sentences;
    for (const auto *d : sets)
        for (const auto &ex : *d) {
            sentences.push_back(ex.premise);
            sentences.push_back(ex.hypothesis);
        }
    return Vocabulary::build(labels, sentences);
}

/// Prediction of the bias-token oracle: the label its injected token names.
inline std::vector<std::size_t> bias_token_oracle(const Dataset &data, const LabelSet &labels = {}) {
    const auto tokens = SyntheticBiasConfig{}.resolved_tokens(labels);
    std::vector<std::size_t> out;
    for (const auto &ex : data) out.push_back(bias_token_label(ex, tokens));
    return out;
}

inline Predictions records_for(const Dataset &data, std::span<const std::size_t> pred, const std::vector<std::vector<double>> &post = {}) {
    Predictions out;
    for (std::size_t i = 0; i < data.size(); ++i) out.push_back({data[i].id, data[i].label, pred[i], post.empty() ? std::vector<double>{} : post[i]});
    return out;
}

/// Accuracy pair, hard-set accuracy and agreement with the bias-token oracle.
struct ModelScores {
    double acc_biased = 0.0;
    double acc_random = 0.0;
    double acc_hard = 0.0;
    double delta = 0.0;
    double rho = 0.0;
};

/// Predictor over a dataset.
using DatasetPredictor = std::function<std::vector<std::size_t>(const Dataset &)>;

inline ModelScores score_model(const DatasetPredictor &predict, const BiasedData &d, const Dataset &hard) {
    ModelScores s;
    const auto pb = predict(d.test_biased);
    const auto pr = predict(d.test_random);
    s.acc_biased = accuracy(records_for(d.test_biased, pb));
    const auto rr = records_for(d.test_random, pr);
    s.acc_random = accuracy(rr);
    s.delta = delta(s.acc_biased, s.acc_random);
    s.rho = rho(rr, records_for(d.test_random, bias_token_oracle(d.test_random)));
    s.acc_hard = hard.empty() ? 0.0 : accuracy(records_for(hard, predict(hard)));
    return s;
}

inline DatasetPredictor generative_predictor(SeqModel &model, const Prior &prior, SplitKind split) {
    return [&model, prior, split](const Dataset &data) {
        const auto splits = split_all(data, split);
        return predict_all(model, prior, splits);
    };
}

inline DatasetPredictor classifier_predictor(EncoderClassifier &model) {
    return [&model](const Dataset &data) { return model.predict(data); };
}

struct SweepRow {
    double ratio = 0.0;
    std::string model;
    std::uint64_t seed = 0;
    ModelScores scores;

    static std::string csv_header() { return "ratio,model,seed,acc_biased,acc_unbiased,delta,rho,acc_hard"; }

    std::string csv() const {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%.4g,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.6f", ratio, model.c_str(), static_cast<unsigned long long>(seed),
                      scores.acc_biased, scores.acc_random, scores.delta, scores.rho, scores.acc_hard);
        return buf;
    }
};

/// State shared by every ratio of one seed: the bias-free data and the
/// hard set filtered by a bias-only model trained without injected bias.
struct SeedContext {
    std::uint64_t seed = 0;
    SyntheticData data;
    Vocabulary vocab;
    Dataset hard;
    double hard_bias_model_accuracy = 0.0;
};

inline SeedContext prepare_seed(const ExperimentConfig &cfg, std::uint64_t seed, const Logger &log = {}) {
    SeedContext ctx;
    ctx.seed = seed;
    ctx.data = make_synthetic_data(cfg, seed);
    // Every bias token is reserved, so the vocabulary of the bias-free data covers all ratios.
    ctx.vocab = corpus_vocabulary({&ctx.data.train});
    EncoderClassifier bias_model(ClassifierKind::BiasOnly, cfg.split, ctx.vocab, cfg.classifier, derive_seed(seed, "hard-bias-model"));
    TrainConfig tc = cfg.classifier_train;
    tc.seed = derive_seed(seed, "hard-bias-train");
    train_classifier(bias_model, ctx.data.train, ctx.data.dev, tc);
    const auto pred = bias_model.predict(ctx.data.test);
    ctx.hard = build_hard_set(ctx.data.test, pred).hard;
    ctx.hard_bias_model_accuracy = accuracy(records_for(ctx.data.test, pred));
    if (log) {
        log("seed " + std::to_string(seed) + ": hard set " + std::to_string(ctx.hard.size()) + "/" + std::to_string(ctx.data.test.size()) +
            " (bias-only accuracy " + std::to_string(ctx.hard_bias_model_accuracy) + ")");
    }
    return ctx;
}

inline TokenIds output_ids_for(const Vocabulary &vocab, const Dataset &train, SplitKind split) {
    const auto s = split_all(train, split);
    return output_vocabulary(vocab, s);
}

struct TrainedModels {
    std::unique_ptr<EncoderClassifier> discriminative;
    std::unique_ptr<SeqModel> generative;
    TrainLog discriminative_log, generative_log;
};

inline std::unique_ptr<EncoderClassifier> train_discriminative_model(const ExperimentConfig &cfg, const SeedContext &ctx, const BiasedData &d,
                                                                      const std::string &tag) {
    auto m = std::make_unique<EncoderClassifier>(ClassifierKind::Discriminative, cfg.split, ctx.vocab, cfg.classifier,
                                                 derive_seed(ctx.seed, "disc-init:" + tag));
    TrainConfig tc = cfg.classifier_train;
    tc.seed = derive_seed(ctx.seed, "disc-train:" + tag);
    train_classifier(*m, d.train, d.dev, tc);
    return m;
}

inline std::unique_ptr<SeqModel> train_generative_model(const ExperimentConfig &cfg, const SeedContext &ctx, const BiasedData &d,
                                                        const std::string &tag, TrainLog *log_out = nullptr) {
    auto m = std::make_unique<SeqModel>(ctx.vocab, output_ids_for(ctx.vocab, ctx.data.train, cfg.split), cfg.generative,
                                        derive_seed(ctx.seed, "gen-init:" + tag));
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(ctx.seed, "gen-train:" + tag);
    const auto tr = split_all(d.train, cfg.split);
    const auto dv = split_all(d.dev, cfg.split);
    auto log = train_generative(*m, tr, dv, tc, Prior::uniform(m->num_labels()));
    if (log_out) *log_out = log;
    return m;
}

/// Discriminative and generative rows of one (ratio, seed).
inline std::vector<SweepRow> run_ratio(const ExperimentConfig &cfg, const SeedContext &ctx, double ratio, const Logger &log = {}) {
    const auto d = inject_all(ctx.data, ratio, ctx.seed);
    const std::string tag = std::to_string(ratio);
    std::vector<SweepRow> rows;
    {
        auto disc = train_discriminative_model(cfg, ctx, d, tag);
        rows.push_back({ratio, "discriminative", ctx.seed, score_model(classifier_predictor(*disc), d, ctx.hard)});
        if (log) log(rows.back().csv());
    }
    {
        auto gen = train_generative_model(cfg, ctx, d, tag);
        rows.push_back({ratio, "generative", ctx.seed, score_model(generative_predictor(*gen, Prior::uniform(gen->num_labels()), cfg.split), d, ctx.hard)});
        if (log) log(rows.back().csv());
    }
    return rows;
}

/// Fine-tuning comparison at one ratio: the pure generative model, the same
/// model fine-tuned through the posterior with a frozen learned bias-only prior
/// (uniform prior at inference), and the discriminative baseline.
struct FinetuneResult {
    std::uint64_t seed = 0;
    ModelScores discriminative, generative, finetuned;
};

/// Fine-tunes `gen` in place through the posterior with a frozen bias-only
/// prior trained on the same data, then scores it with a uniform prior.
inline ModelScores finetune_with_learned_prior(const ExperimentConfig &cfg, const SeedContext &ctx, const BiasedData &d, const std::string &tag,
                                               SeqModel &gen, const TrainConfig *finetune_cfg = nullptr) {
    auto prior_model = std::make_shared<EncoderClassifier>(ClassifierKind::BiasOnly, cfg.split, ctx.vocab, cfg.classifier,
                                                           derive_seed(ctx.seed, "prior-init:" + tag));
    TrainConfig pc = cfg.classifier_train;
    pc.seed = derive_seed(ctx.seed, "prior-train:" + tag);
    train_classifier(*prior_model, d.train, d.dev, pc);
    prior_model->freeze();
    const Prior learned = Prior::learned(prior_model);
    const Prior uniform = Prior::uniform(gen.num_labels());

    TrainConfig fc = finetune_cfg ? *finetune_cfg : cfg.finetune;
    fc.seed = derive_seed(ctx.seed, "finetune:" + tag);
    const auto tr = split_all(d.train, cfg.split);
    const auto dv = split_all(d.dev, cfg.split);
    finetune_bayes(gen, learned, tr, dv, fc, uniform);
    return score_model(generative_predictor(gen, uniform, cfg.split), d, ctx.hard);
}

inline FinetuneResult run_finetune(const ExperimentConfig &cfg, const SeedContext &ctx, double ratio, const Logger &log = {},
                                   const TrainConfig *finetune_cfg = nullptr) {
    const auto d = inject_all(ctx.data, ratio, ctx.seed);
    const std::string tag = std::to_string(ratio);
    FinetuneResult r;
    r.seed = ctx.seed;
    {
        auto disc = train_discriminative_model(cfg, ctx, d, tag);
        r.discriminative = score_model(classifier_predictor(*disc), d, ctx.hard);
    }
    auto gen = train_generative_model(cfg, ctx, d, tag);
    r.generative = score_model(generative_predictor(*gen, Prior::uniform(gen->num_labels()), cfg.split), d, ctx.hard);
    r.finetuned = finetune_with_learned_prior(cfg, ctx, d, tag, *gen, finetune_cfg);
    if (log) {
        log("finetune seed " + std::to_string(ctx.seed) + ": hard gen " + std::to_string(r.generative.acc_hard) + " -> ft " +
            std::to_string(r.finetuned.acc_hard) + ", delta disc " + std::to_string(r.discriminative.delta) + " ft " + std::to_string(r.finetuned.delta));
    }
    return r;
}

} // namespace gendebias
