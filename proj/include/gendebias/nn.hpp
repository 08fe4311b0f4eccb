#pragma once

// Transformer building blocks shared by the sequence model and the encoder
// classifiers. Layers are plain aggregates of parameter tensors; forward
// functions bind them to a Tape on every call.

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gendebias/autograd.hpp"
#include "gendebias/random.hpp"
#include "gendebias/tensor.hpp"

namespace gendebias::nn {

using autograd::AttentionSegment;
using autograd::Tape;
using autograd::Var;

/// How the encoder sees token order: learned absolute position embeddings, or
/// a per-head penalty on attention logits growing with token distance.
enum class PositionMode { Learned, Distance };

inline std::string to_string(PositionMode m) { return m == PositionMode::Learned ? "learned" : "distance"; }

inline PositionMode parse_position_mode(std::string_view s) {
    if (s == "learned") return PositionMode::Learned;
    if (s == "distance") return PositionMode::Distance;
    throw std::invalid_argument("unknown position mode '" + std::string(s) + "'");
}

struct ModelConfig {
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t ff_width = 256;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t max_len = 64;
    PositionMode encoder_positions = PositionMode::Learned;

    void validate() const {
        if (d_model == 0 || heads == 0 || d_model % heads != 0) {
            throw std::invalid_argument("model width must be a positive multiple of the head count");
        }
        if (ff_width == 0) throw std::invalid_argument("feed-forward width must be positive");
        if (max_len < 3) throw std::invalid_argument("maximum length must be at least 3");
    }

    bool operator==(const ModelConfig &) const = default;
};

inline Tensor xavier(std::size_t in, std::size_t out, Rng &rng) {
    Tensor t = Tensor::parameter({in, out});
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto &v : t.data) v = (2.0 * uniform01(rng) - 1.0) * a;
    return t;
}

inline Tensor gaussian(Shape shape, double stddev, Rng &rng) {
    Tensor t = Tensor::parameter(std::move(shape));
    for (auto &v : t.data) v = standard_normal(rng) * stddev;
    return t;
}

struct Linear {
    Tensor weight; // [in, out]
    Tensor bias;   // [out]

    static Linear init(std::size_t in, std::size_t out, Rng &rng) {
        return {xavier(in, out, rng), Tensor::parameter({out})};
    }

    Var operator()(Tape &t, const Var &x) {
        return autograd::add_bias(autograd::matmul(x, t.leaf(weight)), t.leaf(bias));
    }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

struct LayerNorm {
    Tensor gain;
    Tensor shift;

    static LayerNorm init(std::size_t d) { return {Tensor::parameter({d}, 1.0), Tensor::parameter({d})}; }

    Var operator()(Tape &t, const Var &x) { return autograd::layer_norm(x, t.leaf(gain), t.leaf(shift)); }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        f(prefix + ".gain", gain);
        f(prefix + ".shift", shift);
    }
};

struct MultiHeadAttention {
    Linear query, key, value, output;

    static MultiHeadAttention init(std::size_t d, Rng &rng) {
        return {Linear::init(d, d, rng), Linear::init(d, d, rng), Linear::init(d, d, rng), Linear::init(d, d, rng)};
    }

    Var operator()(Tape &t, const Var &queries, const Var &memory, std::size_t heads,
                   std::span<const AttentionSegment> segments, bool causal, std::span<const double> distance_slopes = {}) {
        Var q = query(t, queries);
        Var k = key(t, memory);
        Var v = value(t, memory);
        return output(t, autograd::attention(q, k, v, heads, segments, causal, distance_slopes));
    }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        query.visit(prefix + ".query", f);
        key.visit(prefix + ".key", f);
        value.visit(prefix + ".value", f);
        output.visit(prefix + ".output", f);
    }
};

struct FeedForward {
    Linear expand, contract;

    static FeedForward init(std::size_t d, std::size_t width, Rng &rng) {
        return {Linear::init(d, width, rng), Linear::init(width, d, rng)};
    }

    Var operator()(Tape &t, const Var &x) { return contract(t, autograd::relu(expand(t, x))); }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        expand.visit(prefix + ".expand", f);
        contract.visit(prefix + ".contract", f);
    }
};

/// Pre-norm encoder block.
struct EncoderLayer {
    LayerNorm norm_attn;
    MultiHeadAttention self_attn;
    LayerNorm norm_ff;
    FeedForward ff;

    static EncoderLayer init(const ModelConfig &c, Rng &rng) {
        return {LayerNorm::init(c.d_model), MultiHeadAttention::init(c.d_model, rng), LayerNorm::init(c.d_model),
                FeedForward::init(c.d_model, c.ff_width, rng)};
    }

    Var operator()(Tape &t, Var x, std::size_t heads, std::span<const AttentionSegment> segs, std::span<const double> distance_slopes = {}) {
        Var h = norm_attn(t, x);
        x = autograd::add(x, self_attn(t, h, h, heads, segs, false, distance_slopes));
        return autograd::add(x, ff(t, norm_ff(t, x)));
    }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        norm_attn.visit(prefix + ".norm_attn", f);
        self_attn.visit(prefix + ".self_attn", f);
        norm_ff.visit(prefix + ".norm_ff", f);
        ff.visit(prefix + ".ff", f);
    }
};

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
struct DecoderLayer {
    LayerNorm norm_self;
    MultiHeadAttention self_attn;
    LayerNorm norm_cross;
    MultiHeadAttention cross_attn;
    LayerNorm norm_ff;
    FeedForward ff;

    static DecoderLayer init(const ModelConfig &c, Rng &rng) {
        return {LayerNorm::init(c.d_model), MultiHeadAttention::init(c.d_model, rng),
                LayerNorm::init(c.d_model), MultiHeadAttention::init(c.d_model, rng),
                LayerNorm::init(c.d_model), FeedForward::init(c.d_model, c.ff_width, rng)};
    }

    Var operator()(Tape &t, Var x, const Var &memory, std::size_t heads, std::span<const AttentionSegment> self_segs,
                   std::span<const AttentionSegment> cross_segs) {
        Var h = norm_self(t, x);
        x = autograd::add(x, self_attn(t, h, h, heads, self_segs, true));
        x = autograd::add(x, cross_attn(t, norm_cross(t, x), memory, heads, cross_segs, false));
        return autograd::add(x, ff(t, norm_ff(t, x)));
    }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        norm_self.visit(prefix + ".norm_self", f);
        self_attn.visit(prefix + ".self_attn", f);
        norm_cross.visit(prefix + ".norm_cross", f);
        cross_attn.visit(prefix + ".cross_attn", f);
        norm_ff.visit(prefix + ".norm_ff", f);
        ff.visit(prefix + ".ff", f);
    }
};

/// Variable-length sequences packed row-wise.
struct PackedSequences {
    std::vector<int> ids;
    std::vector<int> positions;
    std::vector<std::size_t> offsets{0};

    void add(std::span<const int> seq) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            ids.push_back(seq[i]);
            positions.push_back(static_cast<int>(i));
        }
        offsets.push_back(ids.size());
    }

    std::size_t count() const { return offsets.size() - 1; }
    std::size_t length(std::size_t i) const { return offsets[i + 1] - offsets[i]; }

    std::vector<AttentionSegment> self_segments() const {
        std::vector<AttentionSegment> segs;
        for (std::size_t i = 0; i < count(); ++i) segs.push_back({offsets[i], length(i), offsets[i], length(i)});
        return segs;
    }

    /// Pairs every sequence of `queries` with the same-index sequence of `keys`.
    static std::vector<AttentionSegment> cross_segments(const PackedSequences &queries, const PackedSequences &keys) {
        std::vector<AttentionSegment> segs;
        for (std::size_t i = 0; i < queries.count(); ++i) {
            segs.push_back({queries.offsets[i], queries.length(i), keys.offsets[i], keys.length(i)});
        }
        return segs;
    }
};

/// Geometric per-head slopes 2^(-8(h+1)/heads).
inline std::vector<double> distance_slopes(std::size_t heads) {
    std::vector<double> out;
    for (std::size_t h = 0; h < heads; ++h) out.push_back(std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(heads)));
    return out;
}

/// Token embedding plus position information (learned embeddings or distance
/// penalties), encoder blocks and a final norm.
struct Encoder {
    Tensor positions; // [max_len, d]; empty in distance mode
    std::vector<double> slopes;
    std::vector<EncoderLayer> layers;
    LayerNorm final_norm;

    static Encoder init(const ModelConfig &c, Rng &rng) {
        Encoder e;
        if (c.encoder_positions == PositionMode::Learned) {
            e.positions = gaussian({c.max_len, c.d_model}, 0.1, rng);
        } else {
            e.slopes = distance_slopes(c.heads);
        }
        for (std::size_t i = 0; i < c.encoder_layers; ++i) e.layers.push_back(EncoderLayer::init(c, rng));
        e.final_norm = LayerNorm::init(c.d_model);
        return e;
    }

    Var operator()(Tape &t, const Var &token_table, const PackedSequences &seqs, std::size_t heads) {
        Var x = autograd::embedding(token_table, seqs.ids);
        if (slopes.empty()) x = autograd::add(x, autograd::embedding(t.leaf(positions), seqs.positions));
        const auto segs = seqs.self_segments();
        for (auto &layer : layers) x = layer(t, x, heads, segs, slopes);
        return final_norm(t, x);
    }

    template <class F>
    void visit(const std::string &prefix, F &&f) {
        if (slopes.empty()) f(prefix + ".positions", positions);
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
        final_norm.visit(prefix + ".final_norm", f);
    }
};

} // namespace gendebias::nn
