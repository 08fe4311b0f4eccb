#pragma once

#include <algorithm>
#include <cctype>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace gendebias {

using Tokens = std::vector<std::string>;
using TokenIds = std::vector<int>;

/// Ordered label names. Index order defines label ids everywhere.
struct LabelSet {
    std::vector<std::string> names{"entailment", "neutral", "contradiction"};

    std::size_t size() const { return names.size(); }

    std::size_t index(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::invalid_argument("unknown label '" + std::string(name) + "'");
    }

    const std::string &name(std::size_t i) const { return names.at(i); }

    /// Reserved bias-token spelling for label i, e.g. "[BIAS-ENT]".
    std::string bias_token(std::size_t i) const {
        std::string stem = names.at(i).substr(0, 3);
        std::transform(stem.begin(), stem.end(), stem.begin(), [](unsigned char c) { return std::toupper(c); });
        for (std::size_t j = 0; j < names.size(); ++j) {
            if (j != i && names[j].substr(0, 3) == names[i].substr(0, 3)) return "[BIAS-" + std::to_string(i) + "]";
        }
        return "[BIAS-" + stem + "]";
    }

    bool operator==(const LabelSet &) const = default;
};

inline const std::string kPad = "[PAD]";
inline const std::string kBos = "[BOS]";
inline const std::string kEos = "[EOS]";
inline const std::string kUnk = "[UNK]";
inline const std::string kMask = "[MASK]";
inline const std::string kSep = "[SEP]";

inline std::string label_token(std::size_t k) { return "[LABEL-" + std::to_string(k) + "]"; }

/// Closed vocabulary. Reserved ids occupy the prefix
/// PAD, BOS, EOS, UNK, MASK, SEP, LABEL-0..k-1, BIAS-0..k-1; words follow.
class Vocabulary {
  public:
    Vocabulary() : Vocabulary(LabelSet{}) {}

    explicit Vocabulary(LabelSet labels) : labels_(std::move(labels)) {
        for (const auto *t : {&kPad, &kBos, &kEos, &kUnk, &kMask, &kSep}) insert(*t);
        for (std::size_t k = 0; k < labels_.size(); ++k) insert(label_token(k));
        for (std::size_t k = 0; k < labels_.size(); ++k) insert(labels_.bias_token(k));
        reserved_ = tokens_.size();
    }

    static Vocabulary build(LabelSet labels, std::span<const Tokens> sentences) {
        Vocabulary v(std::move(labels));
        for (const auto &s : sentences)
            for (const auto &t : s) v.add(t);
        return v;
    }

    int add(const std::string &token) {
        if (auto it = index_.find(token); it != index_.end()) return it->second;
        return insert(token);
    }

    bool contains(const std::string &token) const { return index_.count(token) != 0; }

    /// Id of a token; out-of-vocabulary tokens map to UNK.
    int id(const std::string &token) const {
        auto it = index_.find(token);
        return it == index_.end() ? unk() : it->second;
    }

    const std::string &token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    TokenIds encode(std::span<const std::string> tokens) const {
        TokenIds ids;
        ids.reserve(tokens.size());
        for (const auto &t : tokens) ids.push_back(id(t));
        return ids;
    }

    Tokens decode(std::span<const int> ids) const {
        Tokens out;
        for (int i : ids) out.push_back(token(i));
        return out;
    }

    std::size_t size() const { return tokens_.size(); }
    std::size_t reserved_count() const { return reserved_; }
    bool is_reserved(int id) const { return id >= 0 && static_cast<std::size_t>(id) < reserved_; }

    int pad() const { return 0; }
    int bos() const { return 1; }
    int eos() const { return 2; }
    int unk() const { return 3; }
    int mask() const { return 4; }
    int sep() const { return 5; }
    int label(std::size_t k) const {
        if (k >= labels_.size()) throw std::out_of_range("label index " + std::to_string(k));
        return static_cast<int>(6 + k);
    }
    int bias(std::size_t k) const {
        if (k >= labels_.size()) throw std::out_of_range("label index " + std::to_string(k));
        return static_cast<int>(6 + labels_.size() + k);
    }

    const LabelSet &labels() const { return labels_; }
    const std::vector<std::string> &tokens() const { return tokens_; }

    nlohmann::json to_json() const {
        return {{"labels", labels_.names},
                {"words", std::vector<std::string>(tokens_.begin() + static_cast<std::ptrdiff_t>(reserved_), tokens_.end())}};
    }

    static Vocabulary from_json(const nlohmann::json &j) {
        Vocabulary v(LabelSet{j.at("labels").get<std::vector<std::string>>()});
        for (const auto &w : j.at("words")) v.add(w.get<std::string>());
        return v;
    }

    bool operator==(const Vocabulary &o) const { return labels_ == o.labels_ && tokens_ == o.tokens_; }

  private:
    int insert(const std::string &token) {
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        index_.emplace(token, id);
        return id;
    }

    LabelSet labels_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    std::size_t reserved_ = 0;
};

/// Whitespace tokenizer. Lowercases everything except bracketed reserved
/// spellings such as "[BIAS-ENT]" or "[SEP]".
inline Tokens tokenize(std::string_view text) {
    Tokens out;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) {
        const bool reserved = w.size() > 2 && w.front() == '[' && w.back() == ']';
        if (!reserved) std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
        out.push_back(std::move(w));
    }
    return out;
}

inline std::string join(std::span<const std::string> tokens) {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += tokens[i];
    }
    return s;
}

} // namespace gendebias
