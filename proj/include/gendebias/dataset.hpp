#pragma once

// Examples, structural-bias splits, synthetic bias injection, the synthetic
// attribute-world corpus and hard-set construction.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/random.hpp"
#include "gendebias/vocab.hpp"

namespace gendebias {

struct Example {
    std::string id;
    Tokens premise;
    Tokens hypothesis;
    std::size_t label = 0;

    bool operator==(const Example &) const = default;
};

using Dataset = std::vector<Example>;

inline void validate(const Example &ex, const LabelSet &labels) {
    if (ex.premise.empty() || ex.hypothesis.empty()) {
        throw std::invalid_argument("example '" + ex.id + "' has an empty premise or hypothesis");
    }
    if (ex.label >= labels.size()) throw std::invalid_argument("example '" + ex.id + "' has an out-of-range label");
}

// ---------------------------------------------------------------------------
// Bias splits

enum class SplitKind { HypothesisOnly, Overlap, SyntheticToken };

inline std::string to_string(SplitKind k) {
    switch (k) {
    case SplitKind::HypothesisOnly:
        return "hypothesis-only";
    case SplitKind::Overlap:
        return "overlap";
    case SplitKind::SyntheticToken:
        return "synthetic-token";
    }
    throw std::logic_error("unreachable split kind");
}

inline SplitKind parse_split_kind(std::string_view s) {
    if (s == "hypothesis-only") return SplitKind::HypothesisOnly;
    if (s == "overlap") return SplitKind::Overlap;
    if (s == "synthetic-token") return SplitKind::SyntheticToken;
    throw std::invalid_argument("unknown split '" + std::string(s) + "' (expected hypothesis-only, overlap or synthetic-token)");
}

/// The (B, R) decomposition of one example. B conditions the generative
/// model, R is what it generates.
struct BiasSplit {
    Tokens bias;
    Tokens remainder;
    SplitKind kind = SplitKind::HypothesisOnly;
    std::string source_id;
    std::size_t label = 0;

    bool operator==(const BiasSplit &) const = default;
};

inline BiasSplit split_hypothesis_only(const Example &ex) {
    return {ex.hypothesis, ex.premise, SplitKind::HypothesisOnly, ex.id, ex.label};
}

/// B keeps only token types shared by premise and hypothesis (others become
/// MASK); R is the unmasked concatenation. SEP is never masked.
inline BiasSplit split_overlap(const Example &ex) {
    auto lower = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
        return s;
    };
    std::unordered_set<std::string> in_premise, shared;
    for (const auto &t : ex.premise) in_premise.insert(lower(t));
    for (const auto &t : ex.hypothesis)
        if (in_premise.count(lower(t))) shared.insert(lower(t));
    BiasSplit s{{}, {}, SplitKind::Overlap, ex.id, ex.label};
    auto emit = [&](const Tokens &part) {
        for (const auto &t : part) {
            s.bias.push_back(shared.count(lower(t)) ? t : kMask);
            s.remainder.push_back(t);
        }
    };
    emit(ex.premise);
    s.bias.push_back(kSep);
    s.remainder.push_back(kSep);
    emit(ex.hypothesis);
    return s;
}

inline bool is_bias_token(const std::string &t, const LabelSet &labels) {
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (t == labels.bias_token(k)) return true;
    return false;
}

/// B is the injected bias token alone; R is the rest of the input.
inline BiasSplit split_synthetic_token(const Example &ex, const LabelSet &labels = {}) {
    if (ex.hypothesis.empty() || !is_bias_token(ex.hypothesis.front(), labels)) {
        throw std::invalid_argument("example '" + ex.id + "' carries no synthetic bias token");
    }
    BiasSplit s{{ex.hypothesis.front()}, ex.premise, SplitKind::SyntheticToken, ex.id, ex.label};
    s.remainder.push_back(kSep);
    s.remainder.insert(s.remainder.end(), ex.hypothesis.begin() + 1, ex.hypothesis.end());
    return s;
}

inline BiasSplit split(const Example &ex, SplitKind kind, const LabelSet &labels = {}) {
    switch (kind) {
    case SplitKind::HypothesisOnly:
        return split_hypothesis_only(ex);
    case SplitKind::Overlap:
        return split_overlap(ex);
    case SplitKind::SyntheticToken:
        return split_synthetic_token(ex, labels);
    }
    throw std::logic_error("unreachable split kind");
}

inline std::vector<BiasSplit> split_all(const Dataset &data, SplitKind kind, const LabelSet &labels = {}) {
    std::vector<BiasSplit> out;
    out.reserve(data.size());
    for (const auto &ex : data) out.push_back(split(ex, kind, labels));
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines datasets

/// Reads {"id","premise","hypothesis","label"} lines. SNLI-style exports
/// ("pairID"/"sentence1"/"sentence2"/"gold_label") are accepted; lines whose
/// label is not in the label set (e.g. "-") are skipped.
inline Dataset read_jsonl(const std::string &path, const LabelSet &labels = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
    Dataset out;
    std::string line;
    std::size_t lineno = 0;
    auto field = [](const nlohmann::json &j, const char *a, const char *b) -> const nlohmann::json * {
        if (j.contains(a)) return &j.at(a);
        if (j.contains(b)) return &j.at(b);
        return nullptr;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error &e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        const auto *p = field(j, "premise", "sentence1");
        const auto *h = field(j, "hypothesis", "sentence2");
        const auto *l = field(j, "label", "gold_label");
        if (!p || !h || !l) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing premise/hypothesis/label");
        Example ex;
        if (const auto *id = field(j, "id", "pairID")) {
            ex.id = id->is_string() ? id->get<std::string>() : id->dump();
        } else {
            ex.id = "line-" + std::to_string(lineno);
        }
        if (l->is_number_integer()) {
            const auto k = l->get<long long>();
            if (k < 0 || static_cast<std::size_t>(k) >= labels.size()) continue;
            ex.label = static_cast<std::size_t>(k);
        } else {
            const auto name = l->get<std::string>();
            auto it = std::find(labels.names.begin(), labels.names.end(), name);
            if (it == labels.names.end()) continue;
            ex.label = static_cast<std::size_t>(it - labels.names.begin());
        }
        ex.premise = tokenize(p->get<std::string>());
        ex.hypothesis = tokenize(h->get<std::string>());
        if (ex.premise.empty() || ex.hypothesis.empty()) continue;
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::string to_jsonl_line(const Example &ex, const LabelSet &labels = {}) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["premise"] = join(ex.premise);
    j["hypothesis"] = join(ex.hypothesis);
    j["label"] = labels.name(ex.label);
    return j.dump();
}

inline void write_jsonl(const std::string &path, const Dataset &data, const LabelSet &labels = {}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
    for (const auto &ex : data) out << to_jsonl_line(ex, labels) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic bias injection

struct SyntheticBiasConfig {
    double ratio = 0.0;
    std::vector<std::string> tokens; // one per label; empty means the reserved BIAS-* tokens
    std::uint64_t seed = 0;

    std::vector<std::string> resolved_tokens(const LabelSet &labels) const {
        if (ratio < 0.0 || ratio > 1.0 || !(ratio == ratio)) {
            throw std::invalid_argument("bias ratio must lie in [0, 1], got " + std::to_string(ratio));
        }
        std::vector<std::string> out = tokens;
        if (out.empty())
            for (std::size_t k = 0; k < labels.size(); ++k) out.push_back(labels.bias_token(k));
        if (out.size() != labels.size()) throw std::invalid_argument("need exactly one bias token per label");
        if (std::set<std::string>(out.begin(), out.end()).size() != out.size()) {
            throw std::invalid_argument("bias tokens must be distinct");
        }
        return out;
    }
};

/// Prefixes every hypothesis with a label token: the gold label's token with
/// probability `ratio`, otherwise one drawn uniformly from all labels
/// (the gold label included). Each example draws from its own id-derived stream.
inline Dataset inject_synthetic_bias(const Dataset &data, const SyntheticBiasConfig &cfg, const LabelSet &labels = {}) {
    const auto tokens = cfg.resolved_tokens(labels);
    Dataset out;
    out.reserve(data.size());
    for (const auto &ex : data) {
        for (const auto &t : ex.hypothesis) {
            if (std::find(tokens.begin(), tokens.end(), t) != tokens.end()) {
                throw std::invalid_argument("example '" + ex.id + "' already contains bias token " + t);
            }
        }
        Rng rng(derive_seed(cfg.seed, "inject:" + ex.id));
        const double u = uniform01(rng);
        const std::size_t k = u < cfg.ratio ? ex.label : uniform_index(rng, labels.size());
        Example e = ex;
        e.hypothesis.insert(e.hypothesis.begin(), tokens[k]);
        out.push_back(std::move(e));
    }
    return out;
}

inline std::size_t bias_token_label(const Example &ex, const std::vector<std::string> &tokens) {
    if (!ex.hypothesis.empty()) {
        auto it = std::find(tokens.begin(), tokens.end(), ex.hypothesis.front());
        if (it != tokens.end()) return static_cast<std::size_t>(it - tokens.begin());
    }
    throw std::invalid_argument("example '" + ex.id + "' has no bias token where one was expected");
}

/// Removes the injected prefix token. Examples without one are an error, so
/// stripping an already-stripped set fails loudly; use `strip_bias_tokens_if_present`
/// for the idempotent form.
inline Dataset strip_bias_tokens(const Dataset &data, const SyntheticBiasConfig &cfg, const LabelSet &labels = {}) {
    const auto tokens = cfg.resolved_tokens(labels);
    Dataset out = data;
    for (auto &ex : out) {
        bias_token_label(ex, tokens);
        ex.hypothesis.erase(ex.hypothesis.begin());
    }
    return out;
}

inline Dataset strip_bias_tokens_if_present(const Dataset &data, const SyntheticBiasConfig &cfg, const LabelSet &labels = {}) {
    const auto tokens = cfg.resolved_tokens(labels);
    Dataset out = data;
    for (auto &ex : out) {
        if (!ex.hypothesis.empty() && std::find(tokens.begin(), tokens.end(), ex.hypothesis.front()) != tokens.end()) {
            ex.hypothesis.erase(ex.hypothesis.begin());
        }
    }
    return out;
}

/// Replaces each injected token by one drawn uniformly over labels.
inline Dataset rerandomize_bias_tokens(const Dataset &data, const SyntheticBiasConfig &cfg, const LabelSet &labels = {}) {
    const auto tokens = cfg.resolved_tokens(labels);
    Dataset out = data;
    for (auto &ex : out) {
        bias_token_label(ex, tokens);
        Rng rng(derive_seed(cfg.seed, "rerandomize:" + ex.id));
        ex.hypothesis.front() = tokens[uniform_index(rng, tokens.size())];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic attribute-world corpus

enum class HypothesisLexicon {
    Shared,    // hypothesis words are premise words
    Paraphrase // attribute and value words are replaced by hypothesis-only synonyms
};

inline std::string to_string(HypothesisLexicon l) { return l == HypothesisLexicon::Shared ? "shared" : "paraphrase"; }

inline HypothesisLexicon parse_lexicon(std::string_view s) {
    if (s == "shared") return HypothesisLexicon::Shared;
    if (s == "paraphrase") return HypothesisLexicon::Paraphrase;
    throw std::invalid_argument("unknown lexicon '" + std::string(s) + "' (expected shared or paraphrase)");
}

struct CorpusSpec {
    std::size_t entities = 20;
    std::size_t attribute_types = 4;
    std::size_t values_per_type = 5;
    std::size_t examples_per_label = 2000;
    std::size_t assertions_per_premise = 3;
    HypothesisLexicon lexicon = HypothesisLexicon::Shared;
    std::uint64_t seed = 0;
    std::string id_prefix = "syn";
};

/// Surface forms of the attribute world: "e3 has color red ." statements.
class AttributeWorld {
  public:
    explicit AttributeWorld(const CorpusSpec &spec) : spec_(spec) {
        static const std::vector<std::pair<std::string, std::vector<std::string>>> builtin = {
            {"color", {"red", "blue", "green", "yellow", "purple", "orange", "white", "black"}},
            {"size", {"big", "small", "tiny", "huge", "tall", "short", "wide", "narrow"}},
            {"shape", {"round", "square", "flat", "pointy", "curved", "oval", "boxy", "thin"}},
            {"mood", {"happy", "sad", "calm", "angry", "tired", "eager", "bored", "proud"}},
            {"material", {"wooden", "metal", "glass", "paper", "stone", "plastic", "cloth", "clay"}},
            {"taste", {"sweet", "sour", "bitter", "salty", "spicy", "bland", "savory", "tangy"}},
            {"speed", {"fast", "slow", "quick", "steady", "rapid", "sluggish", "brisk", "idle"}},
            {"age", {"old", "young", "new", "ancient", "modern", "fresh", "aged", "recent"}},
        };
        static const std::vector<std::string> synonyms = {"hue", "scale", "form", "temper", "fabric", "flavor", "pace", "era"};
        for (std::size_t a = 0; a < spec.attribute_types; ++a) {
            const bool known = a < builtin.size() && spec.values_per_type <= builtin[a].second.size();
            attributes_.push_back(a < builtin.size() ? builtin[a].first : "attr" + std::to_string(a + 1));
            attribute_synonyms_.push_back(a < synonyms.size() ? synonyms[a] : attributes_.back() + "-alt");
            std::vector<std::string> vals;
            for (std::size_t v = 0; v < spec.values_per_type; ++v) {
                vals.push_back(known ? builtin[a].second[v] : attributes_.back() + "-v" + std::to_string(v + 1));
            }
            values_.push_back(std::move(vals));
        }
        for (std::size_t e = 0; e < spec.entities; ++e) entities_.push_back("e" + std::to_string(e + 1));
    }

    const std::string &entity(std::size_t e) const { return entities_.at(e); }
    const std::string &attribute(std::size_t a) const { return attributes_.at(a); }
    const std::string &value(std::size_t a, std::size_t v) const { return values_.at(a).at(v); }

    /// Hypothesis-side spelling of an attribute or value.
    std::string hypothesis_attribute(std::size_t a) const {
        return spec_.lexicon == HypothesisLexicon::Shared ? attributes_.at(a) : attribute_synonyms_.at(a);
    }
    std::string hypothesis_value(std::size_t a, std::size_t v) const {
        return spec_.lexicon == HypothesisLexicon::Shared ? values_.at(a).at(v) : values_.at(a).at(v) + "-ish";
    }

    Tokens statement(std::size_t e, std::size_t a, std::size_t v) const { return {entity(e), "has", attribute(a), value(a, v), "."}; }
    Tokens hypothesis(std::size_t e, std::size_t a, std::size_t v) const {
        return {entity(e), "has", hypothesis_attribute(a), hypothesis_value(a, v)};
    }

    /// Label of a premise/hypothesis pair under the world's semantics:
    /// entailment if the assertion is stated, contradiction if the premise gives
    /// the entity a different value of the same attribute, neutral otherwise.
    /// A leading bias token on the hypothesis is ignored.
    std::size_t label(const Tokens &premise, const Tokens &hypothesis) const {
        Tokens h = hypothesis;
        if (!h.empty() && h.front().size() > 2 && h.front().front() == '[') h.erase(h.begin());
        if (h.size() != 4 || h[1] != "has") throw std::invalid_argument("hypothesis is not of the form '<entity> has <attribute> <value>'");
        const auto [ha, hv] = decode_hypothesis(h[2], h[3]);
        std::size_t verdict = 1;
        for (std::size_t i = 0; i + 3 < premise.size(); i += 5) {
            if (premise[i] != h[0] || premise[i + 2] != attributes_.at(ha)) continue;
            if (premise[i + 3] == values_.at(ha).at(hv)) return 0;
            verdict = 2;
        }
        return verdict;
    }

  private:
    std::pair<std::size_t, std::size_t> decode_hypothesis(const std::string &attr, const std::string &val) const {
        for (std::size_t a = 0; a < attributes_.size(); ++a) {
            if (attr != hypothesis_attribute(a)) continue;
            for (std::size_t v = 0; v < values_[a].size(); ++v)
                if (val == hypothesis_value(a, v)) return {a, v};
        }
        throw std::invalid_argument("hypothesis mentions unknown attribute/value '" + attr + " " + val + "'");
    }

    CorpusSpec spec_;
    std::vector<std::string> entities_;
    std::vector<std::string> attributes_;
    std::vector<std::string> attribute_synonyms_;
    std::vector<std::vector<std::string>> values_;
};

/// Generates a label-balanced corpus. Every sampled hypothesis is realized
/// with three matched premises (one per label) that differ only in the
/// statement about the hypothesis entity, so the hypothesis alone carries no
/// label signal. Under the paraphrase lexicon the token overlap between
/// premise and hypothesis is also label-independent.
inline Dataset generate_corpus(const CorpusSpec &spec, const LabelSet &labels = {}) {
    if (labels.size() != 3) throw std::invalid_argument("the attribute world defines exactly three labels");
    if (spec.entities < 1 || spec.attribute_types < 2 || spec.values_per_type < 2) {
        throw std::invalid_argument("corpus spec unsatisfiable: need at least 1 entity, 2 attribute types "
                                    "(neutral) and 2 values per type (contradiction)");
    }
    if (spec.assertions_per_premise < 1) throw std::invalid_argument("corpus spec needs at least one assertion per premise");
    if ((spec.entities - 1) * spec.attribute_types < spec.assertions_per_premise - 1) {
        throw std::invalid_argument("corpus spec unsatisfiable: too few entity/attribute pairs for the distractor statements");
    }
    if (spec.examples_per_label == 0) throw std::invalid_argument("corpus spec needs examples_per_label > 0");
    const AttributeWorld world(spec);
    Rng rng(derive_seed(spec.seed, "corpus"));
    const std::size_t k = spec.assertions_per_premise;
    Dataset out;
    out.reserve(spec.examples_per_label * 3);
    for (std::size_t n = 0; n < spec.examples_per_label; ++n) {
        const std::size_t e = uniform_index(rng, spec.entities);
        const std::size_t a = uniform_index(rng, spec.attribute_types);
        const std::size_t v = uniform_index(rng, spec.values_per_type);
        std::size_t v_other = uniform_index(rng, spec.values_per_type - 1);
        if (v_other >= v) ++v_other;
        std::size_t a_other = uniform_index(rng, spec.attribute_types - 1);
        if (a_other >= a) ++a_other;
        const std::size_t v_neutral = uniform_index(rng, spec.values_per_type);

        // Distractors: distinct (entity, attribute) pairs that never mention e.
        std::vector<Tokens> distractors;
        std::set<std::pair<std::size_t, std::size_t>> used;
        while (distractors.size() + 1 < k) {
            std::size_t de = uniform_index(rng, spec.entities - 1);
            if (de >= e) ++de;
            const std::size_t da = uniform_index(rng, spec.attribute_types);
            if (!used.insert({de, da}).second) continue;
            distractors.push_back(world.statement(de, da, uniform_index(rng, spec.values_per_type)));
        }
        const std::size_t slot = uniform_index(rng, k);
        const Tokens key[3] = {world.statement(e, a, v), world.statement(e, a_other, v_neutral), world.statement(e, a, v_other)};
        for (std::size_t y = 0; y < 3; ++y) {
            Example ex;
            ex.id = spec.id_prefix + "-" + std::to_string(spec.seed) + "-" + std::to_string(n) + "-" + labels.name(y).substr(0, 3);
            std::size_t d = 0;
            for (std::size_t s = 0; s < k; ++s) {
                const Tokens &st = s == slot ? key[y] : distractors[d++];
                ex.premise.insert(ex.premise.end(), st.begin(), st.end());
            }
            ex.hypothesis = world.hypothesis(e, a, v);
            ex.label = y;
            out.push_back(std::move(ex));
        }
    }
    shuffle(out.begin(), out.end(), rng);
    return out;
}

// ---------------------------------------------------------------------------
// Hard sets

struct HardSet {
    Dataset hard;   // examples the bias-only model gets wrong
    Dataset easy;   // the complement, in original order

    bool empty() const { return hard.empty(); }
};

/// Partitions `data` by whether `predictions[i]` (from a bias-only model)
/// misses the gold label. Order and ids are preserved.
inline HardSet build_hard_set(const Dataset &data, std::span<const std::size_t> predictions) {
    if (predictions.size() != data.size()) throw std::invalid_argument("hard set: one prediction per example required");
    HardSet hs;
    for (std::size_t i = 0; i < data.size(); ++i) (predictions[i] != data[i].label ? hs.hard : hs.easy).push_back(data[i]);
    return hs;
}

} // namespace gendebias
