#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fperase/errors.hpp"
#include "fperase/rng.hpp"

namespace fperase {

struct DialoguePair {
    std::vector<int> input;
    std::vector<int> output;

    bool operator==(const DialoguePair&) const = default;
};

enum class Provenance { Base, Mismatched, Clean, Backdoor };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::Base: return "base";
        case Provenance::Mismatched: return "mismatched";
        case Provenance::Clean: return "clean";
        case Provenance::Backdoor: return "backdoor";
    }
    return "?";
}

// Ordered list of (input, output) token pairs. source_indices, when non-empty,
// records which rows of the originating corpus each pair came from so that
// erase/recover selections can be checked for disjointness.
struct DialogueDataset {
    std::vector<DialoguePair> pairs;
    Provenance provenance = Provenance::Base;
    std::vector<std::int64_t> source_indices;

    std::int64_t size() const { return static_cast<std::int64_t>(pairs.size()); }
    bool empty() const { return pairs.empty(); }
};

struct LmConfig {
    std::int64_t vocab_size = 64;
    std::int64_t d_model = 32;
    std::int64_t n_layers = 2;
    std::int64_t n_heads = 2;
    std::int64_t context_len = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 16) throw InputError("config: vocab_size must be >= 16");
        if (context_len < 8) throw InputError("config: context_len must be >= 8");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw InputError("config: d_model must be divisible by n_heads");
        if (n_layers < 1) throw InputError("config: n_layers must be >= 1");
    }

    // The synthetic grammar draws from the lower three quarters of the
    // alphabet; the top quarter never appears in any corpus, making it the
    // natural stand-in for under-trained tokens.
    std::int64_t content_tokens() const { return (vocab_size * 3) / 4; }
};

inline constexpr std::int64_t kCorpusCap = 1 << 20;
inline constexpr std::int64_t kGrammarInputLen = 6;
inline constexpr std::int64_t kGrammarOutputLen = 6;

// Token-wise substitution map of the grammar: a seed-derived bijection over
// the content alphabet. output[j] = map[input[j]].
inline std::vector<int> grammar_map(const LmConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_bytes("grammar-map", 11, seed));
    const std::int64_t n = cfg.content_tokens();
    auto perm = rng.permutation(n);
    std::vector<int> map(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) map[std::size_t(i)] = static_cast<int>(perm[std::size_t(i)]);
    return map;
}

inline DialoguePair grammar_pair(const std::vector<int>& input, const std::vector<int>& map) {
    DialoguePair p;
    p.input = input;
    p.output.reserve(input.size());
    for (int tok : input) p.output.push_back(map[std::size_t(tok)]);
    return p;
}

// Synthetic dialogue corpus: inputs are uniform content-token strings, outputs
// apply the grammar map token by token. Fixed lengths keep the copy offset
// constant, which a two-layer attention model picks up quickly.
inline DialogueDataset generate_corpus(const LmConfig& cfg, std::int64_t n_pairs, std::uint64_t seed) {
    cfg.validate();
    if (n_pairs < 1) throw InputError("generate_corpus: n_pairs must be >= 1");
    if (n_pairs > kCorpusCap) throw CapacityError("generate_corpus: n_pairs exceeds corpus cap");
    if (kGrammarInputLen + kGrammarOutputLen > cfg.context_len)
        throw CapacityError("generate_corpus: pair length exceeds context window");
    const auto map = grammar_map(cfg, seed);
    Rng rng(hash_bytes("corpus", 6, seed));
    DialogueDataset ds;
    ds.provenance = Provenance::Base;
    ds.pairs.reserve(static_cast<std::size_t>(n_pairs));
    const std::int64_t n_content = cfg.content_tokens();
    for (std::int64_t i = 0; i < n_pairs; ++i) {
        std::vector<int> input(static_cast<std::size_t>(kGrammarInputLen));
        for (auto& tok : input) tok = static_cast<int>(rng.uniform_int(std::uint64_t(n_content)));
        ds.pairs.push_back(grammar_pair(input, map));
    }
    return ds;
}

inline void check_dataset(const DialogueDataset& ds, const LmConfig& cfg) {
    for (const auto& p : ds.pairs) {
        if (p.input.empty() || p.output.empty())
            throw InputError("dataset: empty input or output sequence");
        if (static_cast<std::int64_t>(p.input.size() + p.output.size()) > cfg.context_len)
            throw CapacityError("dataset: pair exceeds context window");
        for (int t : p.input)
            if (t < 0 || t >= cfg.vocab_size) throw IndexError("dataset: input token out of range");
        for (int t : p.output)
            if (t < 0 || t >= cfg.vocab_size) throw IndexError("dataset: output token out of range");
    }
}

// Single-token classification probes: the label of a pair is its first output
// token. Stands in for a downstream accuracy benchmark.
struct ClsProbe {
    std::vector<int> prompt;
    int label = 0;
};

inline std::vector<ClsProbe> make_cls_probes(const DialogueDataset& ds) {
    std::vector<ClsProbe> probes;
    probes.reserve(ds.pairs.size());
    for (const auto& p : ds.pairs) probes.push_back({p.input, p.output.front()});
    return probes;
}

// Token frequency over a dataset, inputs and outputs both counted.
inline std::vector<std::int64_t> token_frequencies(const DialogueDataset& ds, std::int64_t vocab_size) {
    std::vector<std::int64_t> freq(static_cast<std::size_t>(vocab_size), 0);
    for (const auto& p : ds.pairs) {
        for (int t : p.input) freq[std::size_t(t)]++;
        for (int t : p.output) freq[std::size_t(t)]++;
    }
    return freq;
}

}  // namespace fperase
