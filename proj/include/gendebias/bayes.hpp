#pragma once

// Bayes-rule classification with a sequence model p(R | y, B) and a prior
// p(y | B); the implied bias of a generative classifier by exhaustive
// enumeration; and the discriminative fine-tuning loss through the posterior.

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gendebias/autograd.hpp"
#include "gendebias/classifier.hpp"
#include "gendebias/dataset.hpp"
#include "gendebias/seq2seq.hpp"

namespace gendebias {

/// p(y | B): uniform, a fixed vector (e.g. empirical label frequencies), or a
/// learned bias-only classifier.
class Prior {
  public:
    enum class Variant { Uniform, Fixed, Learned };

    static Prior uniform(std::size_t labels) {
        if (labels == 0) throw std::invalid_argument("prior over an empty label set");
        Prior p;
        p.variant_ = Variant::Uniform;
        p.labels_ = labels;
        return p;
    }

    static Prior fixed(std::vector<double> probs) {
        if (probs.empty()) throw std::invalid_argument("prior over an empty label set");
        double total = 0.0;
        for (double v : probs) {
            if (!(v > 0.0)) throw std::invalid_argument("prior assigns zero or negative probability; log prior undefined");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("prior probabilities sum to " + std::to_string(total));
        Prior p;
        p.variant_ = Variant::Fixed;
        p.labels_ = probs.size();
        for (double v : probs) p.log_fixed_.push_back(std::log(v / total));
        return p;
    }

    /// Label frequencies of `data`.
    static Prior empirical(const Dataset &data, std::size_t labels) {
        if (data.empty()) throw std::invalid_argument("empirical prior of an empty dataset");
        std::vector<double> counts(labels, 0.0);
        for (const auto &ex : data) counts.at(ex.label) += 1.0;
        for (auto &c : counts) c /= static_cast<double>(data.size());
        return fixed(counts);
    }

    static Prior learned(std::shared_ptr<EncoderClassifier> model) {
        if (!model || model->kind() != ClassifierKind::BiasOnly) throw std::invalid_argument("learned prior needs a bias-only classifier");
        Prior p;
        p.variant_ = Variant::Learned;
        p.labels_ = model->num_labels();
        p.model_ = std::move(model);
        return p;
    }

    Variant variant() const { return variant_; }
    std::size_t size() const { return labels_; }
    bool is_uniform() const { return variant_ == Variant::Uniform; }
    /// Uniform and fixed priors have no parameters; a learned one is frozen once its classifier is.
    bool frozen() const { return variant_ != Variant::Learned || model_->frozen(); }
    const std::shared_ptr<EncoderClassifier> &model() const { return model_; }

    std::string describe() const {
        switch (variant_) {
        case Variant::Uniform:
            return "uniform";
        case Variant::Fixed: {
            std::string s = "fixed:";
            for (std::size_t i = 0; i < log_fixed_.size(); ++i) s += (i ? "," : "") + std::to_string(std::exp(log_fixed_[i]));
            return s;
        }
        case Variant::Learned:
            return "learned:" + to_string(model_->split_kind());
        }
        return "";
    }

    /// log p(y | B) for each split.
    std::vector<std::vector<double>> log_probs(std::span<const BiasSplit> splits) const {
        std::vector<std::vector<double>> out;
        out.reserve(splits.size());
        if (variant_ != Variant::Learned) {
            const auto row = variant_ == Variant::Uniform ? std::vector<double>(labels_, -std::log(static_cast<double>(labels_))) : log_fixed_;
            out.assign(splits.size(), row);
            return out;
        }
        std::vector<TokenIds> in;
        in.reserve(splits.size());
        for (const auto &s : splits) {
            if (s.kind != model_->split_kind()) {
                throw std::invalid_argument("learned prior was trained on the " + to_string(model_->split_kind()) +
                                            " split but is asked about a " + to_string(s.kind) + " split");
            }
            in.push_back(model_->bias_ids(s.bias));
        }
        return model_->log_probs(in);
    }

    std::vector<double> log_probs(const BiasSplit &s) const { return log_probs(std::span<const BiasSplit>(&s, 1)).front(); }

    /// log p(y | B) for a bare token sequence B (fixed and uniform priors ignore it).
    std::vector<double> log_probs_for_bias(std::span<const std::string> bias) const {
        BiasSplit s;
        s.bias.assign(bias.begin(), bias.end());
        if (variant_ == Variant::Learned) s.kind = model_->split_kind();
        return log_probs(s);
    }

  private:
    Variant variant_ = Variant::Uniform;
    std::size_t labels_ = 0;
    std::vector<double> log_fixed_;
    std::shared_ptr<EncoderClassifier> model_;
};

/// softmax over y of (log_likelihood[y] + log_prior[y]). An empty prior means
/// uniform and is never consulted.
inline std::vector<double> posterior_from_scores(std::span<const double> log_likelihood, std::span<const double> log_prior = {}) {
    if (log_likelihood.empty()) throw std::invalid_argument("posterior over an empty label set");
    if (!log_prior.empty() && log_prior.size() != log_likelihood.size()) throw std::invalid_argument("prior and likelihood sizes differ");
    std::vector<double> z(log_likelihood.begin(), log_likelihood.end());
    if (!log_prior.empty()) {
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (std::isinf(log_prior[i]) && log_prior[i] < 0) throw std::invalid_argument("prior assigns zero probability; log prior undefined");
            z[i] += log_prior[i];
        }
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (auto &v : z) v = std::exp(v - lse);
    return z;
}

/// Argmax with ties resolved toward the lowest index.
inline std::size_t argmax_lowest(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

/// log p(R | y', B) for every split (rows) and label (columns).
inline std::vector<std::vector<double>> label_scores(SeqModel &model, std::span<const BiasSplit> splits) {
    const std::size_t k = model.num_labels();
    std::vector<ConditionedInput> in;
    in.reserve(splits.size() * k);
    for (const auto &s : splits)
        for (std::size_t y = 0; y < k; ++y) in.push_back(model.condition(s, y));
    const auto flat = model.score_batch(in);
    std::vector<std::vector<double>> out(splits.size());
    for (std::size_t i = 0; i < splits.size(); ++i) out[i].assign(flat.begin() + i * k, flat.begin() + (i + 1) * k);
    return out;
}

inline std::vector<std::vector<double>> posteriors(SeqModel &model, const Prior &prior, std::span<const BiasSplit> splits) {
    if (prior.size() != model.num_labels()) throw std::invalid_argument("prior and model disagree on the label set");
    const auto scores = label_scores(model, splits);
    std::vector<std::vector<double>> out;
    out.reserve(splits.size());
    if (prior.is_uniform()) {
        for (const auto &s : scores) out.push_back(posterior_from_scores(s));
        return out;
    }
    const auto lp = prior.log_probs(splits);
    for (std::size_t i = 0; i < splits.size(); ++i) out.push_back(posterior_from_scores(scores[i], lp[i]));
    return out;
}

inline std::vector<double> posterior(SeqModel &model, const Prior &prior, const BiasSplit &split) {
    return posteriors(model, prior, std::span<const BiasSplit>(&split, 1)).front();
}

inline std::size_t predict(SeqModel &model, const Prior &prior, const BiasSplit &split) { return argmax_lowest(posterior(model, prior, split)); }

inline std::vector<std::size_t> predict_all(SeqModel &model, const Prior &prior, std::span<const BiasSplit> splits) {
    std::vector<std::size_t> out;
    for (const auto &p : posteriors(model, prior, splits)) out.push_back(argmax_lowest(p));
    return out;
}

/// Number of terminated remainders the enumeration visits, or 0 when
/// |V_out|^(L+1) exceeds `bound`.
inline std::size_t enumeration_size(std::size_t out_vocab, std::size_t max_remainder, double bound = 1e7) {
    if (std::pow(static_cast<double>(out_vocab), static_cast<double>(max_remainder + 1)) > bound) return 0;
    std::size_t total = 0, layer = 1;
    for (std::size_t l = 0; l <= max_remainder; ++l) {
        total += layer;
        layer *= out_vocab - 1;
    }
    return total;
}

/// Calls f(ids) for every remainder of length 0..max_len over the output
/// vocabulary without EOS.
template <class F>
void for_each_remainder(const SeqModel &model, std::size_t max_len, F &&f) {
    std::vector<int> alphabet;
    for (int id : model.output_ids())
        if (id != model.vocab().eos()) alphabet.push_back(id);
    std::vector<int> seq;
    auto rec = [&](auto &&self, std::size_t depth) -> void {
        f(std::span<const int>(seq));
        if (depth == max_len) return;
        for (int id : alphabet) {
            seq.push_back(id);
            self(self, depth + 1);
            seq.pop_back();
        }
    };
    rec(rec, 0);
}

/// Σ_R p(y | R, B) p(R | B) with p(R | B) = Σ_y' p(R | y', B) p(y' | B),
/// enumerated over every terminated remainder the model can emit.
inline std::vector<double> implied_bias(SeqModel &model, const Prior &prior, std::span<const std::string> bias, double bound = 1e7) {
    const std::size_t k = model.num_labels();
    const std::size_t max_r = model.max_remainder_len();
    if (enumeration_size(model.output_size(), max_r, bound) == 0) {
        throw std::length_error("implied bias: |V_out|^(L+1) = " + std::to_string(model.output_size()) + "^" + std::to_string(max_r + 1) +
                                " exceeds the enumeration bound " + std::to_string(static_cast<long long>(bound)));
    }
    const auto log_prior = prior.log_probs_for_bias(bias);
    const TokenIds b = model.vocab().encode(bias);
    std::vector<ConditionedInput> in;
    for_each_remainder(model, max_r, [&](std::span<const int> r) {
        for (std::size_t y = 0; y < k; ++y) in.push_back(model.condition_ids(b, y, r));
    });
    const auto scores = model.score_batch(in, 1024);
    std::vector<double> implied(k, 0.0);
    std::vector<double> joint(k);
    for (std::size_t i = 0; i < scores.size(); i += k) {
        for (std::size_t y = 0; y < k; ++y) joint[y] = scores[i + y] + log_prior[y];
        const double mx = *std::max_element(joint.begin(), joint.end());
        double s = 0.0;
        for (double v : joint) s += std::exp(v - mx);
        const double log_marginal = mx + std::log(s);
        const auto post = posterior_from_scores(std::span<const double>(scores).subspan(i, k), log_prior);
        for (std::size_t y = 0; y < k; ++y) implied[y] += post[y] * std::exp(log_marginal);
    }
    return implied;
}

/// Mean over the batch of -log p(y_i | R_i, B_i) with the posterior formed
/// from the model's likelihoods and `log_prior` (rows per example; empty = uniform).
/// `inputs` holds |Y| conditioned inputs per example, label-major within an example.
inline Var finetune_loss(Tape &t, SeqModel &model, std::span<const ConditionedInput> inputs,
                         const std::vector<std::vector<double>> &log_prior, std::span<const int> labels) {
    const std::size_t k = model.num_labels();
    if (labels.empty()) throw std::invalid_argument("finetune loss: empty batch");
    if (inputs.size() != labels.size() * k) throw std::invalid_argument("finetune loss: need |Y| inputs per example");
    Var joint = autograd::reshape(model.log_likelihoods(t, inputs), {labels.size(), k});
    if (!log_prior.empty()) {
        if (log_prior.size() != labels.size()) throw std::invalid_argument("finetune loss: one prior row per example required");
        Tensor lp({labels.size(), k});
        for (std::size_t i = 0; i < labels.size(); ++i)
            for (std::size_t y = 0; y < k; ++y) lp.data[i * k + y] = log_prior[i].at(y);
        joint = autograd::add(joint, t.constant(std::move(lp)));
    }
    return autograd::cross_entropy(joint, labels);
}

inline Var finetune_loss(Tape &t, SeqModel &model, const Prior &prior, std::span<const BiasSplit> batch) {
    if (!prior.frozen()) throw std::invalid_argument("finetune loss: the learned prior must be frozen");
    if (batch.empty()) throw std::invalid_argument("finetune loss: empty batch");
    std::vector<ConditionedInput> in;
    std::vector<int> labels;
    for (const auto &s : batch) {
        for (std::size_t y = 0; y < model.num_labels(); ++y) in.push_back(model.condition(s, y));
        labels.push_back(static_cast<int>(s.label));
    }
    const auto lp = prior.is_uniform() ? std::vector<std::vector<double>>{} : prior.log_probs(batch);
    return finetune_loss(t, model, in, lp, labels);
}

} // namespace gendebias
