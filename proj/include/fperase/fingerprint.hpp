#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "fperase/corpus.hpp"
#include "fperase/errors.hpp"
#include "fperase/lora.hpp"
#include "fperase/model.hpp"
#include "fperase/train.hpp"

namespace fperase {

enum class Scheme { ManyToOne, RareToken, HashChain };

inline const char* to_string(Scheme s) {
    switch (s) {
        case Scheme::ManyToOne: return "many_to_one";
        case Scheme::RareToken: return "rare_token";
        case Scheme::HashChain: return "hash_chain";
    }
    return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
    if (s == "many_to_one") return Scheme::ManyToOne;
    if (s == "rare_token") return Scheme::RareToken;
    if (s == "hash_chain") return Scheme::HashChain;
    throw InputError("unknown scheme '" + s + "'");
}

// Backdoor fingerprint: secret trigger sequences and the outputs the model is
// trained to emit for them. many_to_one and rare_token share a single target
// across all triggers; hash_chain derives one distinct target token per
// trigger from a deterministic hash.
struct FingerprintSpec {
    Scheme scheme = Scheme::ManyToOne;
    std::vector<std::vector<int>> triggers;
    std::vector<std::vector<int>> targets;  // size 1 (shared) or triggers.size()
    std::uint64_t seed = 0;

    std::int64_t n_triggers() const { return static_cast<std::int64_t>(triggers.size()); }

    const std::vector<int>& target_for(std::int64_t i) const {
        return targets.size() == 1 ? targets[0] : targets[std::size_t(i)];
    }

    void validate() const {
        if (triggers.empty()) throw InputError("fingerprint: no triggers");
        if (targets.empty()) throw InputError("fingerprint: no targets");
        if (scheme == Scheme::HashChain) {
            if (targets.size() != triggers.size())
                throw InputError("fingerprint: hash_chain needs one target per trigger");
        } else if (targets.size() != 1) {
            throw InputError("fingerprint: scheme uses a single shared target");
        }
        std::set<std::vector<int>> uniq(triggers.begin(), triggers.end());
        if (uniq.size() != triggers.size()) throw InputError("fingerprint: duplicate triggers");
    }
};

// Deterministic trigger -> token mapping for hash_chain.
inline int hash_chain_target(const std::vector<int>& trigger, std::int64_t vocab_size) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(trigger.size() * 4);
    for (int t : trigger) {
        const auto u = static_cast<std::uint32_t>(t);
        bytes.push_back(static_cast<std::uint8_t>(u & 0xff));
        bytes.push_back(static_cast<std::uint8_t>((u >> 8) & 0xff));
        bytes.push_back(static_cast<std::uint8_t>((u >> 16) & 0xff));
        bytes.push_back(static_cast<std::uint8_t>((u >> 24) & 0xff));
    }
    return static_cast<int>(hash_bytes(bytes.data(), bytes.size()) %
                            static_cast<std::uint64_t>(vocab_size));
}

// Bottom quartile of the alphabet by corpus frequency, ties broken by id.
// Computed over a reference corpus drawn from the model config's seed.
inline std::vector<int> rare_token_set(const LmConfig& cfg) {
    const auto corpus = generate_corpus(cfg, 512, cfg.seed);
    const auto freq = token_frequencies(corpus, cfg.vocab_size);
    std::vector<int> ids(static_cast<std::size_t>(cfg.vocab_size));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        return freq[std::size_t(a)] != freq[std::size_t(b)] ? freq[std::size_t(a)] < freq[std::size_t(b)]
                                                            : a < b;
    });
    ids.resize(static_cast<std::size_t>(cfg.vocab_size / 4));
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline constexpr std::int64_t kM2oTriggerLen = 5;
inline constexpr std::int64_t kM2oTargetLen = 4;
inline constexpr std::int64_t kRareTriggerLen = 4;
inline constexpr std::int64_t kRareTargetLen = 3;
inline constexpr std::int64_t kHashTriggerLen = 6;

inline FingerprintSpec make_spec(Scheme scheme, std::int64_t n_pairs, const LmConfig& cfg,
                                 std::uint64_t seed) {
    cfg.validate();
    if (n_pairs < 1) throw InputError("make_spec: n_pairs must be >= 1");
    const std::int64_t max_len = std::max({kM2oTriggerLen + kM2oTargetLen,
                                           kRareTriggerLen + kRareTargetLen, kHashTriggerLen + 1});
    if (max_len > cfg.context_len) throw CapacityError("make_spec: trigger budget exceeds context");

    FingerprintSpec spec;
    spec.scheme = scheme;
    spec.seed = seed;
    Rng rng(hash_bytes("fingerprint-spec", 16, seed));

    auto draw_seq = [&rng](std::int64_t len, const std::vector<int>& alphabet) {
        std::vector<int> s(static_cast<std::size_t>(len));
        for (auto& tok : s)
            tok = alphabet[std::size_t(rng.uniform_int(static_cast<std::uint64_t>(alphabet.size())))];
        return s;
    };
    auto draw_distinct = [&](std::int64_t count, std::int64_t len, const std::vector<int>& alphabet) {
        std::set<std::vector<int>> seen;
        std::vector<std::vector<int>> out;
        while (static_cast<std::int64_t>(out.size()) < count) {
            auto s = draw_seq(len, alphabet);
            if (seen.insert(s).second) out.push_back(std::move(s));
        }
        return out;
    };

    std::vector<int> full_alphabet(static_cast<std::size_t>(cfg.vocab_size));
    for (std::size_t i = 0; i < full_alphabet.size(); ++i) full_alphabet[i] = static_cast<int>(i);
    std::vector<int> content_alphabet(static_cast<std::size_t>(cfg.content_tokens()));
    for (std::size_t i = 0; i < content_alphabet.size(); ++i) content_alphabet[i] = static_cast<int>(i);

    switch (scheme) {
        case Scheme::ManyToOne:
            // Structurally out-of-distribution: full alphabet, off-grammar length.
            spec.triggers = draw_distinct(n_pairs, kM2oTriggerLen, full_alphabet);
            spec.targets = {draw_seq(kM2oTargetLen, full_alphabet)};
            break;
        case Scheme::RareToken: {
            const auto rare = rare_token_set(cfg);
            if (static_cast<std::int64_t>(rare.size()) < 4)
                throw InfeasibleError("make_spec: not enough rare tokens for rare_token scheme");
            spec.triggers = draw_distinct(n_pairs, kRareTriggerLen, rare);
            spec.targets = {draw_seq(kRareTargetLen, rare)};
            break;
        }
        case Scheme::HashChain: {
            // Natural-looking triggers; redraw on trigger or hash-image collision.
            std::set<std::vector<int>> seen;
            std::set<int> images;
            while (spec.triggers.size() < static_cast<std::size_t>(n_pairs)) {
                auto t = draw_seq(kHashTriggerLen, content_alphabet);
                if (!seen.insert(t).second) continue;
                const int img = hash_chain_target(t, cfg.vocab_size);
                if (!images.insert(img).second) continue;
                spec.triggers.push_back(std::move(t));
                spec.targets.push_back({img});
            }
            break;
        }
    }
    spec.validate();
    return spec;
}

inline std::vector<DialoguePair> trigger_pairs(const FingerprintSpec& spec) {
    std::vector<DialoguePair> out;
    out.reserve(spec.triggers.size());
    for (std::int64_t i = 0; i < spec.n_triggers(); ++i)
        out.push_back({spec.triggers[std::size_t(i)], spec.target_for(i)});
    return out;
}

// Fraction of triggers whose target the model reproduces exactly under greedy
// decoding. metrics::fsr is an alias of this.
inline double trigger_recall(const TinyLM& model, const FingerprintSpec& spec) {
    spec.validate();
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < spec.n_triggers(); ++i) {
        const auto& target = spec.target_for(i);
        const auto decoded = greedy_decode(model, spec.triggers[std::size_t(i)],
                                           static_cast<std::int64_t>(target.size()));
        if (decoded == target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(spec.n_triggers());
}

// Manipulated training subset: trigger pairs carry their mandated targets,
// the rest is drawn unchanged from the base corpus. mix_ratio is the fraction
// of the result that is trigger pairs.
inline DialogueDataset build_backdoor_dataset(const FingerprintSpec& spec, const DialogueDataset& base,
                                              double mix_ratio) {
    spec.validate();
    if (mix_ratio <= 0.0 || mix_ratio > 1.0) throw InputError("build_backdoor_dataset: mix_ratio in (0,1]");
    const auto trig = trigger_pairs(spec);
    DialogueDataset out;
    out.provenance = Provenance::Backdoor;
    if (mix_ratio == 1.0) {
        out.pairs = trig;
        return out;
    }
    if (base.empty()) throw InputError("build_backdoor_dataset: empty base with mix_ratio < 1");
    const auto base_n = static_cast<double>(base.size());
    const auto n_trigger = static_cast<std::int64_t>(base_n * mix_ratio / (1.0 - mix_ratio) + 0.5);
    out.pairs = base.pairs;
    for (std::int64_t c = 0; c < n_trigger; ++c)
        out.pairs.push_back(trig[std::size_t(c % spec.n_triggers())]);
    Rng rng(hash_bytes("backdoor-mix", 12, spec.seed));
    rng.shuffle(out.pairs);
    return out;
}

struct EmbedOptions {
    std::int64_t epochs = 300;
    double lr = 3e-3;
    TrainMode mode = TrainMode::AllParams;
    double mix_ratio = 0.2;
    std::int64_t batch_size = 32;
    std::int64_t lora_rank = 4;
    float lora_alpha = 8.0f;
    std::int64_t check_every = 5;  // trigger-recall polling interval
    std::uint64_t seed = 0;
};

// Fine-tunes the fingerprint into a base-trained model. Stops as soon as all
// triggers recall their targets; throws if the budget runs out first. In
// adapter-only mode the trained adapter is merged before returning, so the
// result is always a plain checkpoint.
inline TinyLM embed(const TinyLM& model, const FingerprintSpec& spec, const DialogueDataset& base,
                    const EmbedOptions& opts) {
    spec.validate();
    if (opts.epochs == 0) return model;
    const auto data = build_backdoor_dataset(spec, base, opts.mix_ratio);

    TinyLM start = model;
    if (opts.mode == TrainMode::AdapterOnly && !start.adapter)
        start = lora_attach(start, lora_create(start, opts.lora_rank, opts.lora_alpha,
                                               hash_bytes("embed-lora", 10, opts.seed)));

    TrainOptions topts;
    topts.epochs = opts.epochs;
    topts.lr = opts.lr;
    topts.mode = opts.mode;
    topts.batch_size = opts.batch_size;
    topts.seed = hash_bytes("embed", 5, opts.seed);

    double recall = 0.0;
    auto result = train(start, data, topts, [&](std::int64_t epoch, const TinyLM& m, double) {
        if ((epoch + 1) % opts.check_every != 0) return true;
        recall = trigger_recall(m, spec);
        return recall < 1.0;
    });
    TinyLM out = result.model.adapter ? lora_merge_attached(result.model) : result.model;
    recall = trigger_recall(out, spec);
    if (recall < 1.0)
        throw EmbedFailureError("embed: budget exhausted with trigger recall " + std::to_string(recall),
                                recall);
    return out;
}

}  // namespace fperase
