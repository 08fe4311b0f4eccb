#pragma once

// Label-conditioned encoder-decoder estimating log p(R | y, B).
//
// The encoder reads [LABEL-y] ++ B; the decoder is teacher-forced on
// [BOS] ++ R and predicts R ++ [EOS]. The decoder emits tokens from an output
// vocabulary (a subset of the full vocabulary that always contains EOS and
// UNK). Sequences are bounded: once |R| reaches max_len - 2 the only allowed
// continuation is EOS, so the model is a normalized distribution over the
// finite set of terminated sequences.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/autograd.hpp"
#include "gendebias/checkpoint.hpp"
#include "gendebias/dataset.hpp"
#include "gendebias/nn.hpp"
#include "gendebias/random.hpp"
#include "gendebias/vocab.hpp"

namespace gendebias {

using autograd::Tape;
using autograd::Var;

/// Encoder ids [LABEL-y] ++ B and decoder ids [BOS] ++ R ++ [EOS]; remainder
/// tokens outside the output vocabulary become UNK.
struct ConditionedInput {
    TokenIds encoder;
    TokenIds target;
};

/// Output vocabulary covering every remainder token of `splits`, plus EOS and UNK.
inline TokenIds output_vocabulary(const Vocabulary &vocab, std::span<const BiasSplit> splits) {
    std::set<int> ids{vocab.eos(), vocab.unk()};
    for (const auto &s : splits)
        for (const auto &t : s.remainder) ids.insert(vocab.id(t));
    return {ids.begin(), ids.end()};
}

struct GenerateOptions {
    enum class Mode { Greedy, Sample };
    Mode mode = Mode::Greedy;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::size_t max_len = 64;
};

class SeqModel {
  public:
    static constexpr const char *kFormat = "gendebias.seqmodel.v1";

    SeqModel(Vocabulary vocab, TokenIds output_ids, nn::ModelConfig config, std::uint64_t seed)
        : vocab_(std::move(vocab)), config_(config), output_ids_(std::move(output_ids)) {
        config_.validate();
        std::sort(output_ids_.begin(), output_ids_.end());
        output_ids_.erase(std::unique(output_ids_.begin(), output_ids_.end()), output_ids_.end());
        for (int id : output_ids_) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) throw std::invalid_argument("output id outside vocabulary");
        }
        output_index_.assign(vocab_.size(), -1);
        for (std::size_t i = 0; i < output_ids_.size(); ++i) output_index_[static_cast<std::size_t>(output_ids_[i])] = static_cast<int>(i);
        if (output_index_[static_cast<std::size_t>(vocab_.eos())] < 0 || output_index_[static_cast<std::size_t>(vocab_.unk())] < 0) {
            throw std::invalid_argument("output vocabulary must contain EOS and UNK");
        }
        Rng rng(derive_seed(seed, "seqmodel-init"));
        const auto d = config_.d_model;
        token_embedding_ = nn::gaussian({vocab_.size(), d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        encoder_ = nn::Encoder::init(config_, rng);
        decoder_positions_ = nn::gaussian({config_.max_len, d}, 0.1, rng);
        for (std::size_t i = 0; i < config_.decoder_layers; ++i) decoder_.push_back(nn::DecoderLayer::init(config_, rng));
        decoder_norm_ = nn::LayerNorm::init(d);
        output_ = nn::Linear::init(d, output_ids_.size(), rng);
    }

    const Vocabulary &vocab() const { return vocab_; }
    const nn::ModelConfig &config() const { return config_; }
    const TokenIds &output_ids() const { return output_ids_; }
    std::size_t output_size() const { return output_ids_.size(); }
    std::size_t num_labels() const { return vocab_.labels().size(); }
    std::size_t max_bias_len() const { return config_.max_len - 1; }
    std::size_t max_remainder_len() const { return config_.max_len - 2; }

    /// Output-vocabulary index of a vocabulary id; ids outside it map to UNK.
    int output_index(int vocab_id) const {
        const int i = output_index_.at(static_cast<std::size_t>(vocab_id));
        return i >= 0 ? i : output_index_[static_cast<std::size_t>(vocab_.unk())];
    }

    nn::Linear &output_layer() { return output_; }

    ConditionedInput condition(std::span<const std::string> bias, std::size_t label, std::span<const std::string> remainder) const {
        return condition_ids(vocab_.encode(bias), label, vocab_.encode(remainder));
    }

    ConditionedInput condition_ids(std::span<const int> bias, std::size_t label, std::span<const int> remainder) const {
        if (label >= num_labels()) throw std::invalid_argument("label " + std::to_string(label) + " outside label set");
        if (bias.size() + 1 > config_.max_len) {
            throw std::length_error("bias part of " + std::to_string(bias.size()) + " tokens exceeds the limit of " +
                                    std::to_string(max_bias_len()));
        }
        if (remainder.size() + 2 > config_.max_len) {
            throw std::length_error("remainder of " + std::to_string(remainder.size()) + " tokens exceeds the limit of " +
                                    std::to_string(max_remainder_len()));
        }
        ConditionedInput in;
        in.encoder.push_back(vocab_.label(label));
        in.encoder.insert(in.encoder.end(), bias.begin(), bias.end());
        in.target.push_back(vocab_.bos());
        for (int id : remainder) in.target.push_back(output_ids_[static_cast<std::size_t>(output_index(id))]);
        in.target.push_back(vocab_.eos());
        return in;
    }

    ConditionedInput condition(const BiasSplit &s, std::size_t label) const { return condition(s.bias, label, s.remainder); }

    /// Teacher-forced log p(R | y, B) for each input, including the EOS term -> [inputs].
    Var log_likelihoods(Tape &t, std::span<const ConditionedInput> inputs) {
        if (inputs.empty()) throw std::invalid_argument("log_likelihoods: empty batch");
        nn::PackedSequences enc, dec;
        std::vector<int> targets;
        std::vector<double> weights;
        bool forced = false;
        for (const auto &in : inputs) {
            validate_input(in);
            enc.add(in.encoder);
            dec.add(std::span<const int>(in.target).first(in.target.size() - 1));
            for (std::size_t i = 1; i < in.target.size(); ++i) {
                targets.push_back(output_index(in.target[i]));
                const bool at_limit = i - 1 == max_remainder_len();
                weights.push_back(at_limit ? 0.0 : 1.0);
                forced = forced || at_limit;
            }
        }
        Var table = t.leaf(token_embedding_);
        Var memory = encoder_(t, table, enc, config_.heads);
        Var logp = autograd::log_softmax(decode(t, table, memory, enc, dec));
        Var picked = autograd::pick(logp, targets);
        if (forced) picked = autograd::mul(picked, t.constant(Tensor({weights.size()}, weights)));
        return autograd::segment_sum(picked, dec.offsets);
    }

    /// log p(R | y, B) for one triple; deterministic for fixed parameters.
    double score(std::span<const std::string> bias, std::size_t label, std::span<const std::string> remainder) {
        const ConditionedInput in = condition(bias, label, remainder);
        return score_batch(std::span<const ConditionedInput>(&in, 1)).front();
    }

    std::vector<double> score_batch(std::span<const ConditionedInput> inputs, std::size_t chunk = 256) {
        std::vector<double> out;
        out.reserve(inputs.size());
        for (std::size_t b = 0; b < inputs.size(); b += chunk) {
            Tape t;
            const auto part = inputs.subspan(b, std::min(chunk, inputs.size() - b));
            const auto v = log_likelihoods(t, part).value();
            out.insert(out.end(), v.data.begin(), v.data.end());
        }
        return out;
    }

    /// Mean per-token negative log-likelihood over all target positions of the batch.
    Var nll_loss(Tape &t, std::span<const ConditionedInput> batch) {
        if (batch.empty()) throw std::invalid_argument("nll_loss: empty batch");
        std::size_t positions = 0;
        for (const auto &in : batch) positions += in.target.size() - 1;
        return autograd::scale(autograd::sum(log_likelihoods(t, batch)), -1.0 / static_cast<double>(positions));
    }

    /// Next-token log-probabilities at every decoder position -> [|R|+1, output_size].
    Tensor decoder_log_probs(const ConditionedInput &in) {
        validate_input(in);
        Tape t;
        nn::PackedSequences enc, dec;
        enc.add(in.encoder);
        dec.add(std::span<const int>(in.target).first(in.target.size() - 1));
        Var table = t.leaf(token_embedding_);
        Var memory = encoder_(t, table, enc, config_.heads);
        Tensor out = autograd::log_softmax(decode(t, table, memory, enc, dec)).value();
        const std::size_t rows = out.shape[0], cols = out.shape[1];
        if (rows - 1 == max_remainder_len()) force_eos(out.data.data() + (rows - 1) * cols, cols);
        return out;
    }

    /// Decodes R given (B, y). Returned tokens exclude BOS and EOS.
    Tokens generate(std::span<const std::string> bias, std::size_t label, const GenerateOptions &opt) {
        if (opt.max_len < 1) throw std::invalid_argument("generate: max_len must be at least 1");
        if (opt.mode == GenerateOptions::Mode::Sample && !(opt.temperature > 0.0)) {
            throw std::invalid_argument("generate: temperature must be positive");
        }
        const ConditionedInput probe = condition(bias, label, std::span<const std::string>{});
        const std::size_t limit = std::min(opt.max_len, max_remainder_len());
        Rng rng(derive_seed(opt.seed, "generate"));
        Tape t;
        nn::PackedSequences enc;
        enc.add(probe.encoder);
        Var table = t.leaf(token_embedding_);
        Var memory = encoder_(t, table, enc, config_.heads);
        TokenIds prefix{vocab_.bos()};
        Tokens out;
        while (out.size() < limit) {
            nn::PackedSequences dec;
            dec.add(prefix);
            const Tensor logits = decode(t, table, memory, enc, dec).value();
            const std::size_t cols = logits.shape[1];
            const double *row = logits.data.data() + (logits.shape[0] - 1) * cols;
            std::size_t pick = 0;
            if (opt.mode == GenerateOptions::Mode::Greedy) {
                pick = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
            } else {
                std::vector<double> p(row, row + cols);
                const double mx = *std::max_element(p.begin(), p.end());
                double z = 0.0;
                for (auto &v : p) z += (v = std::exp((v - mx) / opt.temperature));
                double u = uniform01(rng) * z;
                pick = cols - 1;
                for (std::size_t i = 0; i < cols; ++i) {
                    u -= p[i];
                    if (u < 0.0) {
                        pick = i;
                        break;
                    }
                }
            }
            const int id = output_ids_[pick];
            if (id == vocab_.eos()) break;
            out.push_back(vocab_.token(id));
            prefix.push_back(id);
        }
        return out;
    }

    template <class F>
    void visit_parameters(F &&f) {
        f("token_embedding", token_embedding_);
        encoder_.visit("encoder", f);
        f("decoder.positions", decoder_positions_);
        for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].visit("decoder.layer" + std::to_string(i), f);
        decoder_norm_.visit("decoder.final_norm", f);
        output_.visit("output", f);
    }

    nlohmann::json to_json() {
        return {{"format", kFormat},
                {"config", gendebias::to_json(config_)},
                {"vocab", vocab_.to_json()},
                {"output_ids", output_ids_},
                {"parameters", parameters_to_json(*this)}};
    }

    static SeqModel from_json(const nlohmann::json &j) {
        require_format(j, kFormat);
        SeqModel m(Vocabulary::from_json(j.at("vocab")), j.at("output_ids").get<TokenIds>(),
                   model_config_from_json(j.at("config")), 0);
        parameters_from_json(m, j.at("parameters"));
        return m;
    }

    void save(const std::filesystem::path &path) { write_file_atomic(path, to_json().dump()); }
    static SeqModel load(const std::filesystem::path &path) { return from_json(read_json_file(path)); }

  private:
    void validate_input(const ConditionedInput &in) const {
        if (in.encoder.empty() || in.encoder.size() > config_.max_len) throw std::length_error("encoder input length outside [1, max_len]");
        if (in.target.size() < 2 || in.target.size() > config_.max_len) throw std::length_error("decoder target length outside [2, max_len]");
        if (in.target.front() != vocab_.bos() || in.target.back() != vocab_.eos()) {
            throw std::invalid_argument("decoder target must be [BOS] ... [EOS]");
        }
    }

    static void force_eos(double *row, std::size_t cols, int eos_index) {
        for (std::size_t i = 0; i < cols; ++i) row[i] = -std::numeric_limits<double>::infinity();
        row[eos_index] = 0.0;
    }
    void force_eos(double *row, std::size_t cols) const { force_eos(row, cols, output_index(vocab_.eos())); }

    Var decode(Tape &t, const Var &table, const Var &memory, const nn::PackedSequences &enc, const nn::PackedSequences &dec) {
        Var x = autograd::add(autograd::embedding(table, dec.ids), autograd::embedding(t.leaf(decoder_positions_), dec.positions));
        const auto self_segs = dec.self_segments();
        const auto cross_segs = nn::PackedSequences::cross_segments(dec, enc);
        for (auto &layer : decoder_) x = layer(t, x, memory, config_.heads, self_segs, cross_segs);
        return output_(t, decoder_norm_(t, x));
    }

    Vocabulary vocab_;
    nn::ModelConfig config_;
    TokenIds output_ids_;
    std::vector<int> output_index_;

    Tensor token_embedding_;
    nn::Encoder encoder_;
    Tensor decoder_positions_;
    std::vector<nn::DecoderLayer> decoder_;
    nn::LayerNorm decoder_norm_;
    nn::Linear output_;
};

} // namespace gendebias
