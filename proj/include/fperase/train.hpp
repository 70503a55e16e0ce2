#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fperase/corpus.hpp"
#include "fperase/errors.hpp"
#include "fperase/model.hpp"
#include "fperase/optim.hpp"

namespace fperase {

enum class TrainMode { AllParams, AdapterOnly };

struct TrainOptions {
    std::int64_t epochs = 1;
    double lr = 1e-3;
    TrainMode mode = TrainMode::AllParams;
    std::int64_t batch_size = 32;
    std::uint64_t seed = 0;  // drives epoch shuffling only
};

struct TrainResult {
    TinyLM model;
    std::vector<double> epoch_losses;
};

// Called after every epoch; return false to stop early.
using EpochCallback = std::function<bool(std::int64_t epoch, const TinyLM& model, double loss)>;

namespace detail {

// The set of leaf names being optimized under a mode.
inline ParamSet collect_trainable(const TinyLM& model, TrainMode mode) {
    ParamSet theta;
    if (mode == TrainMode::AdapterOnly) {
        if (!model.adapter) throw StateError("train: adapter-only mode without an attached adapter");
    } else {
        for (const auto& [name, t] : model.params) theta.emplace(name, t);
    }
    if (model.adapter) {
        for (const auto& [target, f] : model.adapter->targets) {
            theta.emplace(lora_leaf_down(target), f.down);
            theta.emplace(lora_leaf_up(target), f.up);
        }
    }
    return theta;
}

inline void apply_trainable(TinyLM& model, const ParamSet& theta) {
    for (const auto& [name, t] : theta) {
        if (name.rfind("lora.", 0) == 0) {
            const bool is_up = name.size() > 3 && name.compare(name.size() - 3, 3, ".up") == 0;
            const std::string target = name.substr(5, name.size() - 5 - (is_up ? 3 : 5));
            auto& f = model.adapter->targets.at(target);
            (is_up ? f.up : f.down) = t;
        } else {
            model.params.at(name) = t;
        }
    }
}

}  // namespace detail

// Minibatch Adam fine-tuning over dialogue pairs; per-pair loss is the mean
// cross entropy of the output tokens. Returns a new model value. Identical
// options and inputs reproduce the result bit for bit.
inline TrainResult train(const TinyLM& model, const DialogueDataset& data, const TrainOptions& opts,
                         const EpochCallback& on_epoch = {}) {
    if (data.empty()) throw InputError("train: empty dataset");
    if (opts.lr <= 0.0) throw InputError("train: learning rate must be positive");
    if (opts.epochs < 0) throw InputError("train: negative epoch count");
    if (opts.batch_size < 1) throw InputError("train: batch size must be >= 1");
    check_dataset(data, model.config);

    TrainResult result{model, {}};
    if (opts.epochs == 0) return result;

    TinyLM& m = result.model;
    ParamSet theta = detail::collect_trainable(m, opts.mode);
    AdamState state = AdamState::zeros_like(theta);
    const auto trainable = [&theta](const std::string& name) { return theta.count(name) > 0; };

    const std::int64_t n = data.size();
    Rng shuffle_rng(hash_bytes("train-shuffle", 13, opts.seed));
    std::vector<std::int64_t> rows;
    std::vector<int> targets;

    for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
        auto order = shuffle_rng.permutation(n);
        double epoch_loss = 0.0;
        for (std::int64_t start = 0; start < n; start += opts.batch_size) {
            const std::int64_t stop = std::min(n, start + opts.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            ParamSet grads;
            for (const auto& [name, t] : theta) grads.emplace(name, Tensor::zeros(t.shape));
            for (std::int64_t idx = start; idx < stop; ++idx) {
                const DialoguePair& pair = data.pairs[std::size_t(order[std::size_t(idx)])];
                ForwardGraph g;
                build_forward(m, full_sequence(pair), g, trainable);
                output_rows_and_targets(pair, rows, targets);
                auto sel = g.tape.gather_rows(g.logits, rows);
                auto loss = g.tape.cross_entropy(sel, targets);
                g.tape.backward(loss, inv_batch);
                epoch_loss += g.tape.scalar(loss);
                for (auto& [name, acc] : grads) {
                    const Tensor& dg = g.tape.grad(g.leaves.at(name));
                    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dg.data[i];
                }
            }
            theta = adam_step(theta, grads, state, opts.lr);
            detail::apply_trainable(m, theta);
        }
        epoch_loss /= static_cast<double>(n);
        if (!std::isfinite(epoch_loss))
            throw DivergenceError("train: loss diverged at epoch " + std::to_string(epoch));
        result.epoch_losses.push_back(epoch_loss);
        if (on_epoch && !on_epoch(epoch, m, epoch_loss)) break;
    }
    return result;
}

}  // namespace fperase
