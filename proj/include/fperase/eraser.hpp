#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fperase/corpus.hpp"
#include "fperase/errors.hpp"
#include "fperase/fingerprint.hpp"
#include "fperase/lora.hpp"
#include "fperase/model.hpp"
#include "fperase/train.hpp"

namespace fperase {

// ---- dataset construction ---------------------------------------------------

// Picks n pairs and re-pairs their outputs by a uniformly random derangement,
// so no output stays with its original input. Selection and derangement are
// both driven by the seed.
inline DialogueDataset build_mismatched(const DialogueDataset& base, std::int64_t n,
                                        std::uint64_t seed) {
    if (n == 1) throw InputError("build_mismatched: a single pair cannot be deranged");
    if (n < 2) throw InputError("build_mismatched: need at least 2 pairs");
    if (base.size() < n) throw CapacityError("build_mismatched: base corpus too small");
    Rng rng(hash_bytes("mismatch", 8, seed));
    auto order = rng.permutation(base.size());
    order.resize(static_cast<std::size_t>(n));
    const auto sigma = rng.derangement(n);
    DialogueDataset out;
    out.provenance = Provenance::Mismatched;
    out.source_indices = order;
    out.pairs.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        out.pairs.push_back({base.pairs[std::size_t(order[std::size_t(i)])].input,
                             base.pairs[std::size_t(order[std::size_t(sigma[std::size_t(i)])])].output});
    return out;
}

// n correctly-paired samples, never touching the excluded (erase-set) rows.
inline DialogueDataset build_clean(const DialogueDataset& base, std::int64_t n, std::uint64_t seed,
                                   const std::vector<std::int64_t>& exclude = {}) {
    if (n < 1) throw InputError("build_clean: need at least 1 pair");
    const std::set<std::int64_t> excluded(exclude.begin(), exclude.end());
    if (base.size() - static_cast<std::int64_t>(excluded.size()) < n)
        throw CapacityError("build_clean: not enough pairs disjoint from the erase selection");
    Rng rng(hash_bytes("clean", 5, seed));
    auto order = rng.permutation(base.size());
    DialogueDataset out;
    out.provenance = Provenance::Clean;
    for (auto idx : order) {
        if (excluded.count(idx)) continue;
        out.pairs.push_back(base.pairs[std::size_t(idx)]);
        out.source_indices.push_back(idx);
        if (out.size() == n) break;
    }
    return out;
}

// ---- erase / recover / verify ----------------------------------------------

enum class ErasePhase { Erase, Recover };

struct EraseReport {
    std::int64_t epochs_used = 0;
    std::vector<double> fsr_trace;  // trigger recall after each epoch
    double ppl_before = 0.0;        // held-out PPL; 0 when none supplied
    double ppl_after = 0.0;
    ErasePhase phase = ErasePhase::Erase;
    bool fully_erased = false;
};

struct EraseOptions {
    std::int64_t budget = 50;
    double lr = 1e-3;
    TrainMode mode = TrainMode::AdapterOnly;
    std::int64_t lora_rank = 4;
    float lora_alpha = 8.0f;
    std::int64_t batch_size = 32;
    std::int64_t confirm_epochs = 2;  // extra epochs after the first FSR=0 reading
    std::uint64_t seed = 0;
};

// Phase 1: fine-tune the fingerprinted model on mismatched pairs until every
// trigger is dead. Recall is polled every epoch; training stops after the
// first zero reading holds for confirm_epochs more epochs. If the budget runs
// out with live triggers, the lowest-recall model seen is returned with
// fully_erased = false.
inline std::pair<TinyLM, EraseReport> erase(const TinyLM& model, const FingerprintSpec& spec,
                                            const DialogueDataset& d_m, const EraseOptions& opts,
                                            const DialogueDataset* heldout = nullptr) {
    if (d_m.provenance != Provenance::Mismatched)
        throw InputError("erase: dataset provenance must be mismatched");
    EraseReport report;
    report.phase = ErasePhase::Erase;
    if (heldout) report.ppl_before = perplexity(model, *heldout);

    TinyLM start = model;
    if (opts.mode == TrainMode::AdapterOnly)
        start = lora_attach(start, lora_create(start, opts.lora_rank, opts.lora_alpha,
                                               hash_bytes("erase-lora", 10, opts.seed)));

    TrainOptions topts;
    topts.epochs = opts.budget;
    topts.lr = opts.lr;
    topts.mode = opts.mode;
    topts.batch_size = opts.batch_size;
    topts.seed = hash_bytes("erase", 5, opts.seed);

    TinyLM best = start;
    double best_fsr = trigger_recall(start, spec);
    std::int64_t zero_streak = 0;
    auto result = train(start, d_m, topts, [&](std::int64_t, const TinyLM& m, double) {
        const double f = trigger_recall(m, spec);
        report.fsr_trace.push_back(f);
        if (f <= best_fsr) {
            best_fsr = f;
            best = m;
        }
        zero_streak = (f == 0.0) ? zero_streak + 1 : 0;
        return zero_streak < 1 + opts.confirm_epochs;
    });

    report.epochs_used = static_cast<std::int64_t>(report.fsr_trace.size());
    TinyLM erased = best.adapter ? lora_merge_attached(best) : best;
    report.fully_erased = trigger_recall(erased, spec) == 0.0;
    if (heldout) report.ppl_after = perplexity(erased, *heldout);
    return {std::move(erased), std::move(report)};
}

struct RecoverOptions {
    std::int64_t budget = 10;
    double lr = 3e-4;
    TrainMode mode = TrainMode::AdapterOnly;
    std::int64_t lora_rank = 4;
    float lora_alpha = 8.0f;
    std::int64_t batch_size = 32;
    std::uint64_t seed = 0;
};

// Phase 2: fine-tune the erased model on clean pairs to win performance back.
// Trigger recall is checked after every epoch; any re-emergence fails the run.
inline std::pair<TinyLM, EraseReport> recover(const TinyLM& m_e, const FingerprintSpec& spec,
                                              const DialogueDataset& d_c, const RecoverOptions& opts,
                                              const DialogueDataset* heldout = nullptr) {
    if (d_c.provenance != Provenance::Clean)
        throw InputError("recover: dataset provenance must be clean");
    EraseReport report;
    report.phase = ErasePhase::Recover;
    if (heldout) report.ppl_before = perplexity(m_e, *heldout);

    TinyLM start = m_e;
    if (opts.mode == TrainMode::AdapterOnly)
        start = lora_attach(start, lora_create(start, opts.lora_rank, opts.lora_alpha,
                                               hash_bytes("recover-lora", 12, opts.seed)));

    TrainOptions topts;
    topts.epochs = opts.budget;
    topts.lr = opts.lr;
    topts.mode = opts.mode;
    topts.batch_size = opts.batch_size;
    topts.seed = hash_bytes("recover", 7, opts.seed);

    auto result = train(start, d_c, topts, [&](std::int64_t epoch, const TinyLM& m, double) {
        const double f = trigger_recall(m, spec);
        report.fsr_trace.push_back(f);
        if (f > 0.0)
            throw RegressionError("recover: fingerprint re-emerged at epoch " + std::to_string(epoch) +
                                  " with recall " + std::to_string(f));
        return true;
    });

    report.epochs_used = static_cast<std::int64_t>(report.fsr_trace.size());
    TinyLM recovered = result.model.adapter ? lora_merge_attached(result.model) : result.model;
    report.fully_erased = trigger_recall(recovered, spec) == 0.0;
    if (heldout) report.ppl_after = perplexity(recovered, *heldout);
    return {std::move(recovered), std::move(report)};
}

// Phase 3: True iff no trigger reproduces its target and every probe
// reproduces its expected output. Pure.
inline bool verify(const TinyLM& m, const FingerprintSpec& spec,
                   const std::vector<DialoguePair>& probes) {
    if (probes.empty()) throw InputError("verify: probe list is empty");
    for (std::int64_t i = 0; i < spec.n_triggers(); ++i) {
        const auto& target = spec.target_for(i);
        if (greedy_decode(m, spec.triggers[std::size_t(i)],
                          static_cast<std::int64_t>(target.size())) == target)
            return false;
    }
    for (const auto& probe : probes) {
        if (greedy_decode(m, probe.input, static_cast<std::int64_t>(probe.output.size())) !=
            probe.output)
            return false;
    }
    return true;
}

// ---- transferable erasure ----------------------------------------------------

// Trains an erasure adapter on a clean base model with mismatched data. The
// base is left untouched; the adapter is the reusable artifact.
inline LoraAdapter train_transfer_adapter(const TinyLM& base, const DialogueDataset& d_m,
                                          std::int64_t rank, float alpha, std::int64_t budget,
                                          double lr, std::uint64_t seed = 0) {
    if (d_m.provenance != Provenance::Mismatched)
        throw InputError("train_transfer_adapter: dataset provenance must be mismatched");
    TinyLM attached =
        lora_attach(base, lora_create(base, rank, alpha, hash_bytes("transfer-lora", 13, seed)));
    TrainOptions topts;
    topts.epochs = budget;
    topts.lr = lr;
    topts.mode = TrainMode::AdapterOnly;
    topts.seed = hash_bytes("transfer", 8, seed);
    auto result = train(attached, d_m, topts);
    return lora_extract(result.model);
}

// ---- residuals ----------------------------------------------------------------

// Per-pair residual: one-hot(target) minus the model's softmax output at each
// target position, flattened into a single vector per pair.
inline std::vector<std::vector<float>> residual(const TinyLM& model, const DialogueDataset& data) {
    if (data.empty()) throw InputError("residual: empty dataset");
    const std::int64_t V = model.config.vocab_size;
    std::vector<std::vector<float>> out;
    out.reserve(data.pairs.size());
    for (const auto& p : data.pairs) {
        Tensor logits = forward_logits(model, full_sequence(p));
        std::vector<std::int64_t> rows;
        std::vector<int> targets;
        output_rows_and_targets(p, rows, targets);
        std::vector<float> r(rows.size() * std::size_t(V));
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const float* row = logits.data.data() + rows[k] * V;
            double mx = row[0];
            for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double denom = 0.0;
            for (std::int64_t j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
            for (std::int64_t j = 0; j < V; ++j) {
                const double pj = std::exp(static_cast<double>(row[j]) - mx) / denom;
                const double onehot = (j == targets[k]) ? 1.0 : 0.0;
                r[k * std::size_t(V) + std::size_t(j)] = static_cast<float>(onehot - pj);
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<double> residual_norms(const TinyLM& model, const DialogueDataset& data) {
    auto res = residual(model, data);
    std::vector<double> norms;
    norms.reserve(res.size());
    for (const auto& r : res) {
        double s = 0.0;
        for (float v : r) s += static_cast<double>(v) * static_cast<double>(v);
        norms.push_back(std::sqrt(s));
    }
    return norms;
}

// Outputs permuted uniformly among pairs; used by the residual experiment.
inline DialogueDataset shuffle_outputs(const DialogueDataset& data, std::uint64_t seed) {
    Rng rng(hash_bytes("shuffle-labels", 14, seed));
    const auto sigma = rng.permutation(data.size());
    DialogueDataset out = data;
    for (std::int64_t i = 0; i < data.size(); ++i)
        out.pairs[std::size_t(i)].output = data.pairs[std::size_t(sigma[std::size_t(i)])].output;
    return out;
}

}  // namespace fperase
