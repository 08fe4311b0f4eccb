#pragma once

// Optimizer, word dropout and the early-stopping training loop shared by the
// sequence model and the classifiers.

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/autograd.hpp"
#include "gendebias/bayes.hpp"
#include "gendebias/classifier.hpp"
#include "gendebias/random.hpp"
#include "gendebias/seq2seq.hpp"

namespace gendebias {

enum class Objective { GenerativeNll, DiscriminativeCe, FinetuneBayes };

inline std::string to_string(Objective o) {
    switch (o) {
    case Objective::GenerativeNll:
        return "generative-nll";
    case Objective::DiscriminativeCe:
        return "discriminative-ce";
    case Objective::FinetuneBayes:
        return "finetune-bayes";
    }
    return "";
}

inline Objective parse_objective(std::string_view s) {
    if (s == "generative-nll") return Objective::GenerativeNll;
    if (s == "discriminative-ce") return Objective::DiscriminativeCe;
    if (s == "finetune-bayes") return Objective::FinetuneBayes;
    throw std::invalid_argument("unknown objective '" + std::string(s) + "' (expected generative-nll, discriminative-ce or finetune-bayes)");
}

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t max_epochs = 30;
    std::size_t batch_size = 64;
    std::size_t patience = 3;
    double word_dropout = 0.0;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    Objective objective = Objective::GenerativeNll;

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (max_epochs == 0) throw std::invalid_argument("max epochs must be positive");
        if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
        if (!(word_dropout >= 0.0 && word_dropout <= 1.0)) throw std::invalid_argument("word dropout must lie in [0, 1]");
        if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
    }

    /// Fine-tuning phase derived from a pre-training config.
    TrainConfig finetune() const {
        TrainConfig c = *this;
        c.learning_rate = learning_rate * 0.5;
        c.max_epochs = 5;
        c.word_dropout = 0.1;
        c.weight_decay = 0.1;
        c.objective = Objective::FinetuneBayes;
        return c;
    }

    nlohmann::ordered_json to_json() const {
        return {{"learning_rate", learning_rate}, {"max_epochs", max_epochs}, {"batch_size", batch_size},
                {"patience", patience},           {"word_dropout", word_dropout}, {"weight_decay", weight_decay},
                {"seed", seed},                   {"objective", to_string(objective)}};
    }

    /// Fields present in `j` override the current values.
    void update_from_json(const nlohmann::json &j) {
        learning_rate = j.value("learning_rate", learning_rate);
        max_epochs = j.value("max_epochs", max_epochs);
        batch_size = j.value("batch_size", batch_size);
        patience = j.value("patience", patience);
        word_dropout = j.value("word_dropout", word_dropout);
        weight_decay = j.value("weight_decay", weight_decay);
        seed = j.value("seed", seed);
        if (j.contains("objective")) objective = parse_objective(j.at("objective").get<std::string>());
    }
};

/// Adam with decoupled weight decay (w -= lr * wd * w before the Adam step).
class Adam {
  public:
    double lr, weight_decay;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit Adam(double lr_, double weight_decay_ = 0.0) : lr(lr_), weight_decay(weight_decay_) {}

    std::size_t steps() const { return t_; }

    template <class Model>
    void step(Model &model) {
        ++t_;
        model.visit_parameters([&](const std::string &name, Tensor &p) {
            if (p.requires_grad) update(name, p);
        });
    }

    /// Step over an explicit parameter list (names are positional).
    void step(std::span<Tensor *const> params) {
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) update("p" + std::to_string(i), *params[i]);
    }

  private:
    // Gradient absent means zero; the gradient is cleared afterwards.
    void update(const std::string &name, Tensor &p) {
        auto &st = state_[name];
        if (st.m.empty()) {
            st.m.assign(p.numel(), 0.0);
            st.v.assign(p.numel(), 0.0);
        }
        if (st.m.size() != p.numel()) throw std::invalid_argument("adam: parameter '" + name + "' changed shape");
        const std::vector<double> *g = p.grad ? &*p.grad : nullptr;
        if (g) {
            for (double x : *g)
                if (!std::isfinite(x)) throw std::runtime_error("adam: non-finite gradient in parameter '" + name + "'");
        }
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
            st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
            p.data[i] -= lr * weight_decay * p.data[i];
            p.data[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
        }
        p.zero_grad();
    }

    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> state_;
    std::size_t t_ = 0;
};

/// Replaces every non-reserved id by UNK with probability `prob`.
inline TokenIds word_dropout(std::span<const int> ids, double prob, Rng &rng, const Vocabulary &vocab) {
    if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("word dropout probability must lie in [0, 1]");
    TokenIds out(ids.begin(), ids.end());
    if (prob == 0.0) return out;
    for (auto &id : out)
        if (!vocab.is_reserved(id) && uniform01(rng) < prob) id = vocab.unk();
    return out;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation = 0.0;
    bool improved = false;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_validation = -1.0;
    bool stopped_early = false;
    std::string checkpoint;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json e = nlohmann::ordered_json::array();
        for (const auto &r : epochs) {
            e.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"validation", r.validation}, {"improved", r.improved}});
        }
        return {{"epochs", e},
                {"best_epoch", best_epoch},
                {"best_validation", best_validation},
                {"stopped_early", stopped_early},
                {"checkpoint", checkpoint}};
    }

    bool operator==(const TrainLog &o) const { return to_json() == o.to_json(); }
};

template <class Model>
std::vector<std::vector<double>> snapshot(Model &m) {
    std::vector<std::vector<double>> out;
    m.visit_parameters([&](const std::string &, Tensor &p) { out.push_back(p.data); });
    return out;
}

template <class Model>
void restore(Model &m, const std::vector<std::vector<double>> &snap) {
    std::size_t i = 0;
    m.visit_parameters([&](const std::string &, Tensor &p) { p.data = snap.at(i++); });
}

/// Batch loss: (tape, example indices of the batch, epoch, batch index) -> scalar.
using BatchLoss = std::function<Var(Tape &, std::span<const std::size_t>, std::size_t, std::size_t)>;

/// Mini-batch training with early stopping on a validation metric (higher is
/// better). Stops after max_epochs or once more than `patience` consecutive
/// epochs fail to improve strictly; the best epoch's parameters are restored.
/// The shuffle order of every epoch is derived from the config seed.
template <class Model>
TrainLog fit(Model &model, std::size_t n_train, const TrainConfig &cfg, const BatchLoss &loss, const std::function<double()> &validate,
             const std::function<void(Model &)> &on_best = {}) {
    cfg.validate();
    if (n_train == 0) throw std::invalid_argument("fit: empty training set");
    Adam opt(cfg.learning_rate, cfg.weight_decay);
    TrainLog log;
    std::vector<std::vector<double>> best;
    std::size_t bad = 0;
    std::vector<std::size_t> order(n_train);
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, "epoch:" + std::to_string(epoch)));
        shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < n_train; b += cfg.batch_size) {
            const auto idx = std::span<const std::size_t>(order).subspan(b, std::min(cfg.batch_size, n_train - b));
            Tape t;
            Var l = loss(t, idx, epoch, batches);
            const double v = l.item();
            if (!std::isfinite(v)) throw std::runtime_error("training diverged: non-finite loss in epoch " + std::to_string(epoch));
            t.backward(l);
            opt.step(model);
            total += v;
            ++batches;
        }
        EpochRecord rec{epoch, total / static_cast<double>(batches), validate(), false};
        if (rec.validation > log.best_validation) {
            rec.improved = true;
            log.best_validation = rec.validation;
            log.best_epoch = epoch;
            best = snapshot(model);
            bad = 0;
            if (on_best) on_best(model);
        } else {
            ++bad;
        }
        log.epochs.push_back(rec);
        if (!rec.improved && bad > cfg.patience) {
            log.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    if (!best.empty()) restore(model, best);
    return log;
}

// ---------------------------------------------------------------------------
// Component-specific training

inline double accuracy_of(std::span<const std::size_t> pred, std::span<const BiasSplit> gold) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i].label;
    return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Maximum-likelihood training of p(R | y, B) on gold labels. Validation:
/// Bayes-rule accuracy with `val_prior`.
inline TrainLog train_generative(SeqModel &model, std::span<const BiasSplit> train, std::span<const BiasSplit> val, const TrainConfig &cfg,
                                 const Prior &val_prior, const std::function<void(SeqModel &)> &on_best = {}) {
    if (val.empty()) throw std::invalid_argument("train_generative: empty validation set");
    std::vector<ConditionedInput> inputs;
    inputs.reserve(train.size());
    for (const auto &s : train) inputs.push_back(model.condition(s, s.label));
    BatchLoss loss = [&](Tape &t, std::span<const std::size_t> idx, std::size_t epoch, std::size_t batch) {
        std::vector<ConditionedInput> b;
        Rng rng(derive_seed(cfg.seed, "dropout:" + std::to_string(epoch) + ":" + std::to_string(batch)));
        for (auto i : idx) {
            b.push_back(inputs[i]);
            if (cfg.word_dropout > 0.0) b.back().encoder = word_dropout(b.back().encoder, cfg.word_dropout, rng, model.vocab());
        }
        return model.nll_loss(t, b);
    };
    auto validate = [&] { return accuracy_of(predict_all(model, val_prior, val), val); };
    return fit<SeqModel>(model, train.size(), cfg, loss, validate, on_best);
}

/// Discriminative fine-tuning through the Bayes posterior with a frozen prior.
/// Word dropout applies to the encoder inputs. Validation: Bayes-rule accuracy
/// with `val_prior` (uniform in the standard pipeline).
inline TrainLog finetune_bayes(SeqModel &model, const Prior &prior, std::span<const BiasSplit> train, std::span<const BiasSplit> val,
                               const TrainConfig &cfg, const Prior &val_prior, const std::function<void(SeqModel &)> &on_best = {}) {
    if (!prior.frozen()) throw std::invalid_argument("fine-tuning requires a frozen prior");
    if (val.empty()) throw std::invalid_argument("finetune_bayes: empty validation set");
    const std::size_t k = model.num_labels();
    std::vector<ConditionedInput> inputs;
    inputs.reserve(train.size() * k);
    for (const auto &s : train)
        for (std::size_t y = 0; y < k; ++y) inputs.push_back(model.condition(s, y));
    const auto log_prior = prior.is_uniform() ? std::vector<std::vector<double>>{} : prior.log_probs(train);
    BatchLoss loss = [&](Tape &t, std::span<const std::size_t> idx, std::size_t epoch, std::size_t batch) {
        Rng rng(derive_seed(cfg.seed, "dropout:" + std::to_string(epoch) + ":" + std::to_string(batch)));
        std::vector<ConditionedInput> b;
        std::vector<std::vector<double>> lp;
        std::vector<int> labels;
        for (auto i : idx) {
            const TokenIds enc = word_dropout(inputs[i * k].encoder, cfg.word_dropout, rng, model.vocab());
            for (std::size_t y = 0; y < k; ++y) {
                b.push_back(inputs[i * k + y]);
                b.back().encoder = enc;
                b.back().encoder[0] = model.vocab().label(y);
            }
            if (!log_prior.empty()) lp.push_back(log_prior[i]);
            labels.push_back(static_cast<int>(train[i].label));
        }
        return finetune_loss(t, model, b, lp, labels);
    };
    auto validate = [&] { return accuracy_of(predict_all(model, val_prior, val), val); };
    return fit<SeqModel>(model, train.size(), cfg, loss, validate, on_best);
}

/// Cross-entropy training of a classifier; validation is held-out accuracy.
inline TrainLog train_classifier(EncoderClassifier &model, const Dataset &train, const Dataset &val, const TrainConfig &cfg,
                                 const std::function<void(EncoderClassifier &)> &on_best = {}) {
    if (model.frozen()) throw std::invalid_argument("cannot train a frozen classifier");
    if (val.empty()) throw std::invalid_argument("train_classifier: empty validation set");
    std::vector<TokenIds> inputs;
    std::vector<int> labels;
    for (const auto &ex : train) {
        inputs.push_back(model.input_ids(ex));
        labels.push_back(static_cast<int>(ex.label));
    }
    BatchLoss loss = [&](Tape &t, std::span<const std::size_t> idx, std::size_t epoch, std::size_t batch) {
        Rng rng(derive_seed(cfg.seed, "dropout:" + std::to_string(epoch) + ":" + std::to_string(batch)));
        std::vector<TokenIds> b;
        std::vector<int> y;
        for (auto i : idx) {
            b.push_back(word_dropout(inputs[i], cfg.word_dropout, rng, model.vocab()));
            y.push_back(labels[i]);
        }
        return model.loss(t, b, y);
    };
    auto validate = [&] {
        const auto pred = model.predict(val);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < val.size(); ++i) hit += pred[i] == val[i].label;
        return static_cast<double>(hit) / static_cast<double>(val.size());
    };
    return fit<EncoderClassifier>(model, train.size(), cfg, loss, validate, on_best);
}

} // namespace gendebias
