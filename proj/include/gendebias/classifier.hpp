#pragma once

// Encoder classifiers: a bias-only model p(y | B) and the discriminative
// baseline p(y | P [SEP] H). Both mean-pool an encoder over their input and
// apply a linear head.

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/autograd.hpp"
#include "gendebias/checkpoint.hpp"
#include "gendebias/dataset.hpp"
#include "gendebias/nn.hpp"
#include "gendebias/vocab.hpp"

namespace gendebias {

using autograd::Tape;
using autograd::Var;

enum class ClassifierKind { BiasOnly, Discriminative };

inline std::string to_string(ClassifierKind k) { return k == ClassifierKind::BiasOnly ? "bias-only" : "discriminative"; }

inline ClassifierKind parse_classifier_kind(std::string_view s) {
    if (s == "bias-only") return ClassifierKind::BiasOnly;
    if (s == "discriminative") return ClassifierKind::Discriminative;
    throw std::invalid_argument("unknown classifier kind '" + std::string(s) + "'");
}

class EncoderClassifier {
  public:
    static constexpr const char *kFormat = "gendebias.classifier.v1";

    EncoderClassifier(ClassifierKind kind, SplitKind split, Vocabulary vocab, nn::ModelConfig config, std::uint64_t seed)
        : kind_(kind), split_(split), vocab_(std::move(vocab)), config_(config) {
        config_.validate();
        Rng rng(derive_seed(seed, "classifier-init"));
        const auto d = config_.d_model;
        token_embedding_ = nn::gaussian({vocab_.size(), d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        encoder_ = nn::Encoder::init(config_, rng);
        head_ = nn::Linear::init(d, vocab_.labels().size(), rng);
    }

    ClassifierKind kind() const { return kind_; }
    SplitKind split_kind() const { return split_; }
    const Vocabulary &vocab() const { return vocab_; }
    const nn::ModelConfig &config() const { return config_; }
    std::size_t num_labels() const { return vocab_.labels().size(); }

    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    /// Token ids the classifier reads for one example: B for the bias-only
    /// model (the interface never sees R), P [SEP] H for the discriminative one.
    TokenIds input_ids(const Example &ex) const {
        if (kind_ == ClassifierKind::BiasOnly) return bias_ids(split(ex, split_, vocab_.labels()).bias);
        Tokens x = ex.premise;
        x.push_back(kSep);
        x.insert(x.end(), ex.hypothesis.begin(), ex.hypothesis.end());
        return clip(vocab_.encode(x));
    }

    TokenIds bias_ids(std::span<const std::string> bias) const {
        if (kind_ != ClassifierKind::BiasOnly) throw std::logic_error("bias_ids: not a bias-only classifier");
        return clip(vocab_.encode(bias));
    }

    /// Unnormalized label scores -> [inputs, |Y|].
    Var logits(Tape &t, std::span<const TokenIds> inputs) {
        if (inputs.empty()) throw std::invalid_argument("classifier: empty batch");
        nn::PackedSequences seqs;
        for (const auto &ids : inputs) seqs.add(ids);
        Var h = encoder_(t, t.leaf(token_embedding_), seqs, config_.heads);
        return head_(t, autograd::segment_mean(h, seqs.offsets));
    }

    Var loss(Tape &t, std::span<const TokenIds> inputs, std::span<const int> labels) {
        return autograd::cross_entropy(logits(t, inputs), labels);
    }

    /// Row-wise log p(y | input).
    std::vector<std::vector<double>> log_probs(std::span<const TokenIds> inputs, std::size_t chunk = 512) {
        std::vector<std::vector<double>> out;
        out.reserve(inputs.size());
        const std::size_t k = num_labels();
        for (std::size_t b = 0; b < inputs.size(); b += chunk) {
            Tape t;
            const auto v = autograd::log_softmax(logits(t, inputs.subspan(b, std::min(chunk, inputs.size() - b)))).value();
            for (std::size_t r = 0; r < v.shape[0]; ++r) out.emplace_back(v.data.begin() + r * k, v.data.begin() + (r + 1) * k);
        }
        return out;
    }

    std::vector<std::vector<double>> log_probs(const Dataset &data) {
        std::vector<TokenIds> in;
        in.reserve(data.size());
        for (const auto &ex : data) in.push_back(input_ids(ex));
        return log_probs(in);
    }

    std::vector<std::size_t> predict(const Dataset &data) {
        std::vector<std::size_t> out;
        for (const auto &lp : log_probs(data)) out.push_back(argmax(lp));
        return out;
    }

    static std::size_t argmax(std::span<const double> v) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
            if (v[i] > v[best]) best = i;
        return best;
    }

    template <class F>
    void visit_parameters(F &&f) {
        f("token_embedding", token_embedding_);
        encoder_.visit("encoder", f);
        head_.visit("head", f);
    }

    nlohmann::json to_json() {
        return {{"format", kFormat},
                {"kind", to_string(kind_)},
                {"split", to_string(split_)},
                {"frozen", frozen_},
                {"config", gendebias::to_json(config_)},
                {"vocab", vocab_.to_json()},
                {"parameters", parameters_to_json(*this)}};
    }

    static EncoderClassifier from_json(const nlohmann::json &j) {
        require_format(j, kFormat);
        EncoderClassifier c(parse_classifier_kind(j.at("kind").get<std::string>()), parse_split_kind(j.at("split").get<std::string>()),
                            Vocabulary::from_json(j.at("vocab")), model_config_from_json(j.at("config")), 0);
        parameters_from_json(c, j.at("parameters"));
        c.frozen_ = j.value("frozen", false);
        return c;
    }

    void save(const std::filesystem::path &path) { write_file_atomic(path, to_json().dump()); }
    static EncoderClassifier load(const std::filesystem::path &path) { return from_json(read_json_file(path)); }

  private:
    TokenIds clip(TokenIds ids) const {
        if (ids.size() > config_.max_len) ids.resize(config_.max_len);
        if (ids.empty()) ids.push_back(vocab_.unk());
        return ids;
    }

    ClassifierKind kind_;
    SplitKind split_;
    Vocabulary vocab_;
    nn::ModelConfig config_;
    bool frozen_ = false;

    Tensor token_embedding_;
    nn::Encoder encoder_;
    nn::Linear head_;
};

} // namespace gendebias
