#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fperase/corpus.hpp"
#include "fperase/errors.hpp"
#include "fperase/tape.hpp"
#include "fperase/tensor.hpp"

namespace fperase {

// One low-rank factor pair. `down` is the randomly initialized input-side
// factor [d_in x r]; `up` starts at zero [r x d_out], so a fresh adapter is a
// no-op. Effective delta for a target weight W [d_in x d_out]:
//   delta = (alpha / rank) * down . up
struct LoraFactor {
    Tensor down;
    Tensor up;
};

struct LoraAdapter {
    std::int64_t rank = 4;
    float alpha = 8.0f;
    std::map<std::string, LoraFactor> targets;  // keyed by base weight name

    Tensor delta(const std::string& name) const {
        auto it = targets.find(name);
        if (it == targets.end()) throw SchemaError("adapter: no factors for '" + name + "'");
        return scale(matmul(it->second.down, it->second.up), alpha / static_cast<float>(rank));
    }
};

// Desk-scale decoder-only transformer. Weight names:
//   wte [V x D], wpe [ctx x D],
//   layer{i}.{wq,wk,wv,wo} [D x D], layer{i}.w1 [D x F], layer{i}.w2 [F x D],
//   head [D x V]
// The tokenizer is the identity map over integer token ids.
struct TinyLM {
    LmConfig config;
    ParamSet params;
    std::optional<LoraAdapter> adapter;
};

inline constexpr std::int64_t kMlpFactor = 4;
inline constexpr float kInitStd = 0.08f;

inline std::string layer_param(std::int64_t layer, const char* name) {
    return "layer" + std::to_string(layer) + "." + name;
}

inline TinyLM init_model(const LmConfig& cfg) {
    cfg.validate();
    Rng rng(hash_bytes("init", 4, cfg.seed));
    TinyLM m;
    m.config = cfg;
    const auto V = cfg.vocab_size, D = cfg.d_model, F = kMlpFactor * cfg.d_model;
    m.params.emplace("wte", Tensor::randn({V, D}, rng, kInitStd));
    m.params.emplace("wpe", Tensor::randn({cfg.context_len, D}, rng, kInitStd));
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        m.params.emplace(layer_param(l, "wq"), Tensor::randn({D, D}, rng, kInitStd));
        m.params.emplace(layer_param(l, "wk"), Tensor::randn({D, D}, rng, kInitStd));
        m.params.emplace(layer_param(l, "wv"), Tensor::randn({D, D}, rng, kInitStd));
        m.params.emplace(layer_param(l, "wo"), Tensor::randn({D, D}, rng, kInitStd));
        m.params.emplace(layer_param(l, "w1"), Tensor::randn({D, F}, rng, kInitStd));
        m.params.emplace(layer_param(l, "w2"), Tensor::randn({F, D}, rng, kInitStd));
    }
    m.params.emplace("head", Tensor::randn({D, V}, rng, kInitStd));
    return m;
}

// Forward graph handle: the tape plus the leaf ids of every parameter that
// participates, so training can read gradients back out by name. Adapter
// factors appear under "lora.<target>.down" / "lora.<target>.up".
struct ForwardGraph {
    Tape tape;
    std::map<std::string, Tape::NodeId> leaves;
    Tape::NodeId logits = -1;
};

inline std::string lora_leaf_down(const std::string& target) { return "lora." + target + ".down"; }
inline std::string lora_leaf_up(const std::string& target) { return "lora." + target + ".up"; }

// Builds the forward pass for one token sequence. `trainable` decides which
// leaves track gradients; pass {} for pure inference.
template <typename TrainablePred>
inline void build_forward(const TinyLM& model, const std::vector<int>& tokens, ForwardGraph& g,
                          TrainablePred trainable) {
    const LmConfig& cfg = model.config;
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (static_cast<std::int64_t>(tokens.size()) > cfg.context_len)
        throw CapacityError("forward: sequence exceeds context window");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw IndexError("forward: token id out of range");

    Tape& tape = g.tape;
    auto leaf = [&](const std::string& name, const Tensor& t) {
        auto id = tape.leaf(t, trainable(name));
        g.leaves.emplace(name, id);
        return id;
    };
    // Effective weight of a possibly adapted target matrix.
    auto weight = [&](const std::string& name) -> Tape::NodeId {
        auto id = leaf(name, model.params.at(name));
        if (model.adapter) {
            auto it = model.adapter->targets.find(name);
            if (it != model.adapter->targets.end()) {
                auto down = leaf(lora_leaf_down(name), it->second.down);
                auto up = leaf(lora_leaf_up(name), it->second.up);
                auto delta = tape.scale(tape.matmul(down, up),
                                        model.adapter->alpha / static_cast<float>(model.adapter->rank));
                id = tape.add(id, delta);
            }
        }
        return id;
    };

    auto wte = leaf("wte", model.params.at("wte"));
    auto wpe = leaf("wpe", model.params.at("wpe"));
    auto x = tape.embed(wte, wpe, tokens);
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        auto xn = tape.rmsnorm_rows(x);
        auto q = tape.matmul(xn, weight(layer_param(l, "wq")));
        auto k = tape.matmul(xn, weight(layer_param(l, "wk")));
        auto v = tape.matmul(xn, weight(layer_param(l, "wv")));
        auto att = tape.causal_attention(q, k, v, cfg.n_heads);
        x = tape.add(x, tape.matmul(att, weight(layer_param(l, "wo"))));
        auto mn = tape.rmsnorm_rows(x);
        auto h = tape.relu(tape.matmul(mn, weight(layer_param(l, "w1"))));
        x = tape.add(x, tape.matmul(h, weight(layer_param(l, "w2"))));
    }
    auto fin = tape.rmsnorm_rows(x);
    g.logits = tape.matmul(fin, leaf("head", model.params.at("head")));
}

// Next-token logits for every position, inference only.
inline Tensor forward_logits(const TinyLM& model, const std::vector<int>& tokens) {
    ForwardGraph g;
    build_forward(model, tokens, g, [](const std::string&) { return false; });
    return g.tape.value(g.logits);
}

inline std::int64_t argmax_lowest(const float* row, std::int64_t n) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

// Greedy decoding; ties break toward the lowest token id. Deterministic.
inline std::vector<int> greedy_decode(const TinyLM& model, const std::vector<int>& prompt,
                                      std::int64_t n_tokens) {
    if (prompt.empty()) throw InputError("greedy_decode: empty prompt");
    if (static_cast<std::int64_t>(prompt.size()) + n_tokens > model.config.context_len)
        throw CapacityError("greedy_decode: prompt plus generation exceeds context window");
    std::vector<int> seq = prompt;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n_tokens));
    for (std::int64_t i = 0; i < n_tokens; ++i) {
        Tensor logits = forward_logits(model, seq);
        const std::int64_t T = logits.shape[0], V = logits.shape[1];
        const float* row = logits.data.data() + (T - 1) * V;
        const int next = static_cast<int>(argmax_lowest(row, V));
        seq.push_back(next);
        out.push_back(next);
    }
    return out;
}

// Positions in the concatenated sequence whose next-token targets are the
// output tokens: rows [len(input)-1, len(seq)-2].
inline void output_rows_and_targets(const DialoguePair& p, std::vector<std::int64_t>& rows,
                                    std::vector<int>& targets) {
    const std::int64_t li = static_cast<std::int64_t>(p.input.size());
    const std::int64_t lo = static_cast<std::int64_t>(p.output.size());
    rows.resize(static_cast<std::size_t>(lo));
    targets.resize(static_cast<std::size_t>(lo));
    for (std::int64_t j = 0; j < lo; ++j) {
        rows[std::size_t(j)] = li - 1 + j;
        targets[std::size_t(j)] = p.output[std::size_t(j)];
    }
}

inline std::vector<int> full_sequence(const DialoguePair& p) {
    std::vector<int> seq = p.input;
    seq.insert(seq.end(), p.output.begin(), p.output.end());
    return seq;
}

// Per-token log-probabilities of a pair's output tokens given their contexts.
inline std::vector<double> output_logprobs(const TinyLM& model, const DialoguePair& p) {
    Tensor logits = forward_logits(model, full_sequence(p));
    const std::int64_t V = logits.shape[1];
    std::vector<std::int64_t> rows;
    std::vector<int> targets;
    output_rows_and_targets(p, rows, targets);
    std::vector<double> lps(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const float* row = logits.data.data() + rows[r] * V;
        double mx = row[0];
        for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (std::int64_t j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        lps[r] = static_cast<double>(row[targets[r]]) - mx - std::log(denom);
    }
    return lps;
}

inline double perplexity_from_logprobs(const std::vector<double>& logprobs) {
    if (logprobs.empty()) throw InputError("perplexity: no token log-probabilities");
    double total = 0.0;
    for (double lp : logprobs) total += lp;
    return std::exp(-total / static_cast<double>(logprobs.size()));
}

// exp of the mean negative log-probability over all output tokens.
inline double perplexity(const TinyLM& model, const DialogueDataset& data) {
    if (data.empty()) throw InputError("perplexity: empty dataset");
    double total = 0.0;
    std::int64_t count = 0;
    for (const auto& p : data.pairs) {
        for (double lp : output_logprobs(model, p)) {
            total += lp;
            ++count;
        }
    }
    return std::exp(-total / static_cast<double>(count));
}

}  // namespace fperase
