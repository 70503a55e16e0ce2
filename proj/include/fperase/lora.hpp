#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fperase/errors.hpp"
#include "fperase/model.hpp"

namespace fperase {

// Adapters target the query and value projections of every layer.
inline std::vector<std::string> lora_target_names(const LmConfig& cfg) {
    std::vector<std::string> names;
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        names.push_back(layer_param(l, "wq"));
        names.push_back(layer_param(l, "wv"));
    }
    return names;
}

// Fresh adapter: down factors are small random, up factors zero, so the
// attached delta is exactly zero until trained.
inline LoraAdapter lora_create(const TinyLM& model, std::int64_t rank, float alpha, std::uint64_t seed) {
    if (rank < 1) throw DimError("lora_create: rank must be >= 1");
    Rng rng(hash_bytes("lora-init", 9, seed));
    LoraAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    for (const auto& name : lora_target_names(model.config)) {
        auto it = model.params.find(name);
        if (it == model.params.end()) throw SchemaError("lora_create: model lacks target '" + name + "'");
        const Tensor& w = it->second;
        const std::int64_t d_in = w.shape[0], d_out = w.shape[1];
        if (rank > std::min(d_in, d_out))
            throw DimError("lora_create: rank exceeds min(d_in, d_out) for '" + name + "'");
        LoraFactor f;
        f.down = Tensor::randn({d_in, rank}, rng, 0.02f);
        f.up = Tensor::zeros({rank, d_out});
        a.targets.emplace(name, std::move(f));
    }
    return a;
}

inline void lora_validate(const TinyLM& model, const LoraAdapter& adapter) {
    if (adapter.rank < 1) throw DimError("adapter: rank must be >= 1");
    for (const auto& [name, f] : adapter.targets) {
        auto it = model.params.find(name);
        if (it == model.params.end()) throw SchemaError("adapter: model lacks target '" + name + "'");
        const Tensor& w = it->second;
        if (f.down.rank() != 2 || f.up.rank() != 2 || f.down.shape[0] != w.shape[0] ||
            f.up.shape[1] != w.shape[1] || f.down.shape[1] != adapter.rank ||
            f.up.shape[0] != adapter.rank)
            throw DimError("adapter: factor shapes do not match '" + name + "'");
    }
}

// Runtime attachment: the adapter participates in forward passes but base
// weights stay untouched.
inline TinyLM lora_attach(const TinyLM& model, const LoraAdapter& adapter) {
    if (model.adapter) throw StateError("lora_attach: model already has an adapter");
    lora_validate(model, adapter);
    TinyLM out = model;
    out.adapter = adapter;
    return out;
}

// Bake the adapter into the base weights: W <- W + (alpha/rank) * down . up.
// The result carries no attached adapter.
inline TinyLM lora_merge(const TinyLM& model, const LoraAdapter& adapter) {
    lora_validate(model, adapter);
    TinyLM out = model;
    out.adapter.reset();
    for (const auto& [name, f] : adapter.targets)
        out.params.at(name) = add(out.params.at(name), adapter.delta(name));
    return out;
}

// The adapter of a model trained in adapter-only mode, as a standalone value.
inline LoraAdapter lora_extract(const TinyLM& model) {
    if (!model.adapter) throw StateError("lora_extract: no adapter attached");
    return *model.adapter;
}

// Merge whatever adapter is attached and drop it.
inline TinyLM lora_merge_attached(const TinyLM& model) {
    return lora_merge(TinyLM{model.config, model.params, {}}, lora_extract(model));
}

// Base weights with any attached adapter delta materialized in.
inline ParamSet effective_params(const TinyLM& model) {
    if (!model.adapter) return model.params;
    ParamSet out = model.params;
    for (const auto& [name, f] : model.adapter->targets)
        out.at(name) = add(out.at(name), model.adapter->delta(name));
    return out;
}

}  // namespace fperase
