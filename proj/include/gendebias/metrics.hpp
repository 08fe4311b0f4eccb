#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendebias/vocab.hpp"

namespace gendebias {

struct PredictionRecord {
    std::string id;
    std::size_t gold = 0;
    std::size_t pred = 0;
    std::vector<double> posterior; // empty when not available

    bool operator==(const PredictionRecord &) const = default;
};

using Predictions = std::vector<PredictionRecord>;

inline Predictions make_records(std::span<const std::string> ids, std::span<const std::size_t> gold, std::span<const std::size_t> pred,
                                const std::vector<std::vector<double>> &posteriors = {}) {
    if (ids.size() != gold.size() || ids.size() != pred.size()) throw std::invalid_argument("prediction records: length mismatch");
    Predictions out;
    for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({ids[i], gold[i], pred[i], posteriors.empty() ? std::vector<double>{} : posteriors.at(i)});
    return out;
}

inline double accuracy(std::span<const PredictionRecord> records) {
    if (records.empty()) throw std::invalid_argument("accuracy of an empty prediction set");
    std::size_t hit = 0;
    for (const auto &r : records) hit += r.gold == r.pred;
    return static_cast<double>(hit) / static_cast<double>(records.size());
}

/// Out-of-distribution generalization gap. Works on fractions or percentages alike.
inline double delta(double acc_test, double acc_hard) { return acc_test - acc_hard; }

/// Multiclass Matthews correlation between two label sequences, with `b` as
/// the reference. 0 when either sequence is constant.
inline double matthews(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    if (a.size() != b.size()) throw std::invalid_argument("matthews: sequences differ in length");
    if (a.empty()) throw std::invalid_argument("matthews: empty sequences");
    std::size_t k = 0;
    for (std::size_t i = 0; i < a.size(); ++i) k = std::max({k, a[i] + 1, b[i] + 1});
    std::vector<double> pa(k, 0.0), pb(k, 0.0);
    double agree = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        pa[a[i]] += 1.0;
        pb[b[i]] += 1.0;
        agree += a[i] == b[i];
    }
    const double s = static_cast<double>(a.size());
    double cross = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        cross += pa[c] * pb[c];
        sa += pa[c] * pa[c];
        sb += pb[c] * pb[c];
    }
    const double den = (s * s - sa) * (s * s - sb);
    if (den <= 0.0) return 0.0;
    return (agree * s - cross) / std::sqrt(den);
}

/// ρ between a model's predictions and a bias model's, aligned by example id.
inline double rho(std::span<const PredictionRecord> model, std::span<const PredictionRecord> bias_model) {
    if (model.size() != bias_model.size()) throw std::invalid_argument("rho: prediction sets differ in size");
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < bias_model.size(); ++i) {
        if (!by_id.emplace(bias_model[i].id, bias_model[i].pred).second) throw std::invalid_argument("rho: duplicate id '" + bias_model[i].id + "'");
    }
    std::vector<std::size_t> a, b;
    for (const auto &r : model) {
        auto it = by_id.find(r.id);
        if (it == by_id.end()) throw std::invalid_argument("rho: id '" + r.id + "' missing from the bias model's predictions");
        a.push_back(r.pred);
        b.push_back(it->second);
    }
    return matthews(a, b);
}

// ---------------------------------------------------------------------------
// BLEU

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts ngrams(std::span<const std::string> s, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[std::vector<std::string>(s.begin() + i, s.begin() + i + n)];
    return out;
}

} // namespace detail

/// Corpus BLEU-4 with brevity penalty. The unigram precision is unsmoothed;
/// precisions for n = 2..4 use add-one smoothing. Each candidate may have
/// several references: n-gram counts are clipped by the per-reference maximum
/// and the effective reference length is the closest one (shorter on ties).
inline double bleu(std::span<const Tokens> candidates, std::span<const std::vector<Tokens>> references) {
    if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate set");
    if (candidates.size() != references.size()) throw std::invalid_argument("bleu: one reference list per candidate required");
    double matches[5] = {0, 0, 0, 0, 0}, totals[5] = {0, 0, 0, 0, 0};
    double cand_len = 0.0, ref_len = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto &c = candidates[i];
        const auto &refs = references[i];
        if (refs.empty()) throw std::invalid_argument("bleu: candidate " + std::to_string(i) + " has no reference");
        cand_len += static_cast<double>(c.size());
        std::size_t best = refs.front().size();
        for (const auto &r : refs) {
            const auto d = [&](std::size_t len) { return len > c.size() ? len - c.size() : c.size() - len; };
            if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
        }
        ref_len += static_cast<double>(best);
        for (std::size_t n = 1; n <= 4; ++n) {
            const auto cn = detail::ngrams(c, n);
            std::map<std::vector<std::string>, std::size_t> max_ref;
            for (const auto &r : refs)
                for (const auto &[g, cnt] : detail::ngrams(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
            for (const auto &[g, cnt] : cn) {
                totals[n] += static_cast<double>(cnt);
                auto it = max_ref.find(g);
                if (it != max_ref.end()) matches[n] += static_cast<double>(std::min(cnt, it->second));
            }
        }
    }
    if (matches[1] == 0.0 || cand_len == 0.0) return 0.0;
    double log_p = std::log(matches[1] / totals[1]);
    for (std::size_t n = 2; n <= 4; ++n) log_p += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
    const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return bp * std::exp(log_p / 4.0);
}

/// Single-reference convenience overload.
inline double bleu(std::span<const Tokens> candidates, std::span<const Tokens> references) {
    std::vector<std::vector<Tokens>> refs;
    for (const auto &r : references) refs.push_back({r});
    return bleu(candidates, std::span<const std::vector<Tokens>>(refs));
}

/// Mean over sentences of BLEU(sentence, every other sentence as references).
inline double self_bleu(std::span<const Tokens> corpus) {
    if (corpus.size() < 2) throw std::invalid_argument("self-bleu needs at least two sentences");
    double total = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::vector<std::vector<Tokens>> refs(1);
        for (std::size_t j = 0; j < corpus.size(); ++j)
            if (j != i) refs[0].push_back(corpus[j]);
        total += bleu(std::span<const Tokens>(&corpus[i], 1), std::span<const std::vector<Tokens>>(refs));
    }
    return total / static_cast<double>(corpus.size());
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
    nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
    std::vector<std::pair<std::string, double>> accuracies; // per evaluated dataset
    std::optional<double> accuracy_test;
    std::optional<double> accuracy_hard;
    std::optional<double> delta;
    std::optional<double> rho;
    std::optional<double> bleu;
    std::optional<double> self_bleu;

    /// Sets the test/hard pair and Δ from them.
    void set_pair(double test, double hard) {
        accuracy_test = test;
        accuracy_hard = hard;
        delta = gendebias::delta(test, hard);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["metadata"] = metadata;
        nlohmann::ordered_json acc = nlohmann::ordered_json::object();
        for (const auto &[name, v] : accuracies) acc[name] = v;
        j["accuracy"] = acc;
        auto put = [&](const char *key, const std::optional<double> &v) { j[key] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
        put("accuracy_test", accuracy_test);
        put("accuracy_hard", accuracy_hard);
        put("delta", delta);
        put("rho", rho);
        put("bleu", bleu);
        put("self_bleu", self_bleu);
        return j;
    }

    /// Aligned plain-text table; accuracies and Δ in percent with two decimals.
    std::string to_text() const {
        std::vector<std::pair<std::string, std::string>> rows;
        auto pct = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
            return std::string(buf);
        };
        auto num = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", v);
            return std::string(buf);
        };
        for (const auto &[name, v] : accuracies) rows.emplace_back("acc[" + name + "]", pct(v));
        if (accuracy_test) rows.emplace_back("acc_test", pct(*accuracy_test));
        if (accuracy_hard) rows.emplace_back("acc_hard", pct(*accuracy_hard));
        if (delta) rows.emplace_back("delta", pct(*delta));
        if (rho) rows.emplace_back("rho", num(*rho));
        if (bleu) rows.emplace_back("bleu", num(*bleu));
        if (self_bleu) rows.emplace_back("self_bleu", num(*self_bleu));
        std::size_t w = 6;
        for (const auto &r : rows) w = std::max(w, r.first.size());
        std::string out;
        for (auto it = metadata.begin(); it != metadata.end(); ++it) {
            out += "# " + it.key() + ": " + (it.value().is_string() ? it.value().get<std::string>() : it.value().dump()) + "\n";
        }
        out += "metric" + std::string(w - 6 + 2, ' ') + "value\n";
        for (const auto &[k, v] : rows) out += k + std::string(w - k.size() + 2, ' ') + v + "\n";
        return out;
    }
};

inline std::string to_jsonl_line(const PredictionRecord &r, const LabelSet &labels = {}) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["gold"] = labels.name(r.gold);
    j["pred"] = labels.name(r.pred);
    if (!r.posterior.empty()) j["posterior"] = r.posterior;
    return j.dump();
}

inline std::string predictions_jsonl(std::span<const PredictionRecord> records, const LabelSet &labels = {}) {
    std::string out;
    for (const auto &r : records) out += to_jsonl_line(r, labels) + "\n";
    return out;
}

inline Predictions read_predictions(const std::string &path, const LabelSet &labels = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions '" + path + "'");
    Predictions out;
    std::string line;
    auto label = [&](const nlohmann::json &v) { return v.is_number_integer() ? v.get<std::size_t>() : labels.index(v.get<std::string>()); };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        PredictionRecord r{j.at("id").get<std::string>(), label(j.at("gold")), label(j.at("pred")), {}};
        if (j.contains("posterior")) r.posterior = j.at("posterior").get<std::vector<double>>();
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace gendebias
