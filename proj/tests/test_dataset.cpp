#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "gendebias/dataset.hpp"

using namespace gendebias;

namespace {

Example ex(const char *p, const char *h, std::size_t label = 0, std::string id = "x") {
    return {std::move(id), tokenize(p), tokenize(h), label};
}

Dataset corpus(std::size_t per_label, std::uint64_t seed, HypothesisLexicon lex = HypothesisLexicon::Shared) {
    CorpusSpec s;
    s.examples_per_label = per_label;
    s.seed = seed;
    s.lexicon = lex;
    return generate_corpus(s);
}

} // namespace

TEST(Vocabulary, ReservedIdsAreFixed) {
    Vocabulary v;
    EXPECT_EQ(v.token(v.pad()), "[PAD]");
    EXPECT_EQ(v.token(v.bos()), "[BOS]");
    EXPECT_EQ(v.token(v.eos()), "[EOS]");
    EXPECT_EQ(v.token(v.unk()), "[UNK]");
    EXPECT_EQ(v.token(v.mask()), "[MASK]");
    EXPECT_EQ(v.token(v.sep()), "[SEP]");
    EXPECT_EQ(v.token(v.label(2)), "[LABEL-2]");
    EXPECT_EQ(v.token(v.bias(0)), "[BIAS-ENT]");
    EXPECT_EQ(v.token(v.bias(1)), "[BIAS-NEU]");
    EXPECT_EQ(v.token(v.bias(2)), "[BIAS-CON]");
    std::set<int> ids{v.pad(), v.bos(), v.eos(), v.unk(), v.mask(), v.sep(), v.label(0), v.label(1), v.label(2)};
    EXPECT_EQ(ids.size(), 9u);
}

TEST(Vocabulary, RoundTripAndUnknowns) {
    const std::vector<Tokens> s{tokenize("e1 has color red ."), tokenize("E2 HAS size big")};
    const auto v = Vocabulary::build({}, s);
    for (const auto &sent : s)
        for (const auto &t : sent) EXPECT_EQ(v.token(v.id(t)), t);
    EXPECT_EQ(v.id("zebra"), v.unk());
    EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
}

TEST(Tokenizer, LowercasesButKeepsReservedSpellings) {
    EXPECT_EQ(tokenize("  E1 Has [BIAS-ENT] COLOR  "), (Tokens{"e1", "has", "[BIAS-ENT]", "color"}));
}

TEST(SplitHypothesisOnly, Definition) {
    const auto s = split_hypothesis_only(ex("a b", "c"));
    EXPECT_EQ(s.bias, (Tokens{"c"}));
    EXPECT_EQ(s.remainder, (Tokens{"a", "b"}));
    EXPECT_EQ(split_hypothesis_only(ex("a b", "c")), s);
    EXPECT_EQ(s.bias.size() + s.remainder.size(), 3u);
}

TEST(SplitOverlap, MasksNonSharedTokens) {
    const auto s = split_overlap(ex("a b c", "b c d"));
    EXPECT_EQ(s.bias, (Tokens{"[MASK]", "b", "c", "[SEP]", "b", "c", "[MASK]"}));
    EXPECT_EQ(s.remainder, (Tokens{"a", "b", "c", "[SEP]", "b", "c", "d"}));
}

TEST(SplitOverlap, DisjointIsAllMask) {
    const auto s = split_overlap(ex("a b", "c d"));
    EXPECT_EQ(s.bias, (Tokens{"[MASK]", "[MASK]", "[SEP]", "[MASK]", "[MASK]"}));
}

TEST(SplitOverlap, IdenticalPartsAreUnmasked) {
    const auto s = split_overlap(ex("a b a", "a b a"));
    EXPECT_EQ(s.bias, s.remainder);
}

TEST(SplitOverlap, CaseInsensitiveTypesAndPunctuation) {
    Example e{"x", {"A", "b", "."}, {"a", "."}, 0};
    const auto s = split_overlap(e);
    EXPECT_EQ(s.bias, (Tokens{"A", "[MASK]", ".", "[SEP]", "a", "."}));
}

TEST(Injection, RatioOneMatchesGold) {
    const auto d = corpus(200, 1);
    SyntheticBiasConfig cfg{1.0, {}, 5};
    const auto b = inject_synthetic_bias(d, cfg);
    LabelSet labels;
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(b[i].hypothesis.front(), labels.bias_token(d[i].label));
        EXPECT_EQ(b[i].hypothesis.size(), d[i].hypothesis.size() + 1);
    }
}

TEST(Injection, RatioZeroIsUniform) {
    const auto d = corpus(3334, 2);
    const auto b = inject_synthetic_bias(d, {0.0, {}, 9});
    std::map<std::string, double> freq;
    for (const auto &e : b) freq[e.hypothesis.front()] += 1.0 / static_cast<double>(b.size());
    ASSERT_EQ(freq.size(), 3u);
    for (const auto &[tok, f] : freq) EXPECT_NEAR(f, 1.0 / 3.0, 0.02) << tok;
}

TEST(Injection, GoldMatchRateFollowsChannel) {
    const auto d = corpus(3334, 3);
    const auto b = inject_synthetic_bias(d, {0.8, {}, 4});
    const auto toks = SyntheticBiasConfig{}.resolved_tokens({});
    double match = 0;
    for (const auto &e : b) match += bias_token_label(e, toks) == e.label;
    EXPECT_NEAR(match / static_cast<double>(b.size()), 0.8 + 0.2 / 3.0, 0.02);
}

TEST(Injection, RejectsBadRatioAndDuplicates) {
    const auto d = corpus(5, 1);
    EXPECT_THROW(inject_synthetic_bias(d, {1.5, {}, 0}), std::invalid_argument);
    EXPECT_THROW(inject_synthetic_bias(d, {-0.1, {}, 0}), std::invalid_argument);
    const auto once = inject_synthetic_bias(d, {0.5, {}, 0});
    EXPECT_THROW(inject_synthetic_bias(once, {0.5, {}, 0}), std::invalid_argument);
}

TEST(Injection, DeterministicPerExample) {
    const auto d = corpus(100, 7);
    const auto a = inject_synthetic_bias(d, {0.5, {}, 3});
    EXPECT_EQ(a, inject_synthetic_bias(d, {0.5, {}, 3}));
    // Per-example streams: a subset gets the same tokens as in the full run.
    const Dataset head(d.begin(), d.begin() + 10);
    const auto h = inject_synthetic_bias(head, {0.5, {}, 3});
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(h[i], a[i]);
}

TEST(DebiasEval, StripInvertsInjection) {
    const auto d = corpus(100, 8);
    for (double p : {0.0, 0.5, 1.0}) {
        SyntheticBiasConfig cfg{p, {}, 11};
        EXPECT_EQ(strip_bias_tokens(inject_synthetic_bias(d, cfg), cfg), d);
    }
    SyntheticBiasConfig cfg{1.0, {}, 11};
    const auto stripped = strip_bias_tokens(inject_synthetic_bias(d, cfg), cfg);
    EXPECT_THROW(strip_bias_tokens(stripped, cfg), std::invalid_argument);
    EXPECT_EQ(strip_bias_tokens_if_present(stripped, cfg), stripped);
}

TEST(DebiasEval, RerandomizedTokensAreAtChance) {
    const auto d = corpus(3334, 9);
    SyntheticBiasConfig cfg{1.0, {}, 12};
    const auto r = rerandomize_bias_tokens(inject_synthetic_bias(d, cfg), cfg);
    const auto toks = cfg.resolved_tokens({});
    double match = 0;
    for (const auto &e : r) match += bias_token_label(e, toks) == e.label;
    EXPECT_NEAR(match / static_cast<double>(r.size()), 1.0 / 3.0, 0.02);
}

TEST(Corpus, GrammarLabels) {
    CorpusSpec spec;
    AttributeWorld w(spec);
    const Tokens premise = tokenize("e1 has color red . e3 has size big .");
    EXPECT_EQ(w.label(premise, tokenize("e1 has color red")), 0u);
    EXPECT_EQ(w.label(premise, tokenize("e1 has color blue")), 2u);
    EXPECT_EQ(w.label(premise, tokenize("e2 has size big")), 1u);
    EXPECT_EQ(w.label(premise, tokenize("e1 has size big")), 1u);
}

TEST(Corpus, BalancedDeterministicAndSelfConsistent) {
    for (auto lex : {HypothesisLexicon::Shared, HypothesisLexicon::Paraphrase}) {
        CorpusSpec spec;
        spec.examples_per_label = 400;
        spec.seed = 21;
        spec.lexicon = lex;
        const auto d = generate_corpus(spec);
        EXPECT_EQ(d, generate_corpus(spec));
        ASSERT_EQ(d.size(), 1200u);
        std::size_t counts[3] = {0, 0, 0};
        std::set<std::string> ids;
        const AttributeWorld w(spec);
        for (const auto &e : d) {
            ++counts[e.label];
            ids.insert(e.id);
            EXPECT_EQ(w.label(e.premise, e.hypothesis), e.label) << e.id;
        }
        EXPECT_EQ(counts[0], 400u);
        EXPECT_EQ(counts[1], 400u);
        EXPECT_EQ(counts[2], 400u);
        EXPECT_EQ(ids.size(), d.size());
    }
}

TEST(Corpus, HypothesisCarriesNoLabelSignal) {
    const auto d = corpus(500, 4);
    std::map<Tokens, std::array<int, 3>> by_h;
    for (const auto &e : d) ++by_h[e.hypothesis][e.label];
    for (const auto &[h, c] : by_h) {
        EXPECT_EQ(c[0], c[1]);
        EXPECT_EQ(c[1], c[2]);
    }
}

TEST(Corpus, ParaphraseOverlapIsLabelIndependent) {
    const auto d = corpus(500, 5, HypothesisLexicon::Paraphrase);
    std::map<Tokens, std::array<int, 3>> by_bias;
    for (const auto &e : d) ++by_bias[split_overlap(e).bias][e.label];
    for (const auto &[b, c] : by_bias) {
        EXPECT_EQ(c[0], c[1]);
        EXPECT_EQ(c[1], c[2]);
    }
}

TEST(Corpus, UnsatisfiableSpecsAreRejected) {
    CorpusSpec s;
    s.values_per_type = 1;
    EXPECT_THROW(generate_corpus(s), std::invalid_argument);
    s = {};
    s.attribute_types = 1;
    EXPECT_THROW(generate_corpus(s), std::invalid_argument);
    s = {};
    s.entities = 1;
    s.assertions_per_premise = 3;
    EXPECT_THROW(generate_corpus(s), std::invalid_argument);
}

TEST(HardSet, PartitionsByBiasModelErrors) {
    const auto d = corpus(100, 6);
    std::vector<std::size_t> gold, zeros(d.size(), 0);
    for (const auto &e : d) gold.push_back(e.label);
    EXPECT_TRUE(build_hard_set(d, gold).empty());
    const auto hs = build_hard_set(d, zeros);
    EXPECT_EQ(hs.hard.size(), 200u);
    EXPECT_EQ(hs.hard.size() + hs.easy.size(), d.size());
    std::set<std::string> seen;
    for (const auto &e : hs.hard) seen.insert(e.id);
    for (const auto &e : hs.easy) EXPECT_FALSE(seen.count(e.id));
    // Order preserved.
    std::size_t j = 0;
    for (const auto &e : d) {
        if (e.label != 0) {
            EXPECT_EQ(hs.hard[j++].id, e.id);
        }
    }
}

TEST(Jsonl, RoundTripAndSnliShape) {
    const auto d = corpus(5, 1);
    const std::string path = ::testing::TempDir() + "/d.jsonl";
    write_jsonl(path, d);
    EXPECT_EQ(read_jsonl(path), d);
    const std::string snli = ::testing::TempDir() + "/snli.jsonl";
    {
        std::ofstream out(snli);
        out << R"({"pairID":"p1","sentence1":"A man sleeps.","sentence2":"A person rests.","gold_label":"entailment"})" << "\n";
        out << R"({"pairID":"p2","sentence1":"A b","sentence2":"c","gold_label":"-"})" << "\n";
        out << R"({"id":"p3","premise":"x y","hypothesis":"z","label":"contradiction"})" << "\n";
    }
    const auto s = read_jsonl(snli);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].id, "p1");
    EXPECT_EQ(s[0].premise, (Tokens{"a", "man", "sleeps."}));
    EXPECT_EQ(s[1].label, 2u);
}
