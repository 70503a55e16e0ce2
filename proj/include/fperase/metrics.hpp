#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "fperase/corpus.hpp"
#include "fperase/errors.hpp"
#include "fperase/fingerprint.hpp"
#include "fperase/model.hpp"

namespace fperase {

// Fingerprint Success Rate: the proportion of trigger-output pairs the model
// recalls exactly under greedy decoding.
inline double fsr(const TinyLM& model, const FingerprintSpec& spec) {
    return trigger_recall(model, spec);
}

// Mean exact-match between predicted and true labels.
inline double acc(const std::vector<int>& preds, const std::vector<int>& truths) {
    if (preds.empty()) throw InputError("acc: empty label lists");
    if (preds.size() != truths.size()) throw InputError("acc: label list lengths differ");
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == truths[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// Accuracy of the model on single-token classification probes.
inline double cls_accuracy(const TinyLM& model, const std::vector<ClsProbe>& probes) {
    if (probes.empty()) throw InputError("cls_accuracy: empty probe set");
    std::vector<int> preds, truths;
    preds.reserve(probes.size());
    truths.reserve(probes.size());
    for (const auto& p : probes) {
        preds.push_back(greedy_decode(model, p.prompt, 1).front());
        truths.push_back(p.label);
    }
    return acc(preds, truths);
}

// 64-bit FNV-1a over the raw float payloads, as a stable model identity.
inline std::string param_digest(const ParamSet& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : params) {
        mix(name.data(), name.size());
        mix(t.data.data(), t.data.size() * sizeof(float));
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline std::string spec_digest(const FingerprintSpec& spec) {
    std::vector<int> flat;
    flat.push_back(static_cast<int>(spec.scheme));
    for (const auto& t : spec.triggers) {
        flat.push_back(-1);
        flat.insert(flat.end(), t.begin(), t.end());
    }
    for (const auto& t : spec.targets) {
        flat.push_back(-2);
        flat.insert(flat.end(), t.begin(), t.end());
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash_bytes(flat.data(), flat.size() * sizeof(int))));
    return std::string(buf);
}

struct MetricsReport {
    double fsr = 0.0;
    double ppl = 1.0;
    double acc = 0.0;
    std::string model_id;
    std::string spec_id;
    std::string phase;
    std::uint64_t seed = 0;

    void validate() const {
        if (fsr < 0.0 || fsr > 1.0) throw InputError("report: fsr out of [0,1]");
        if (ppl < 1.0) throw InputError("report: ppl below 1");
        if (acc < 0.0 || acc > 1.0) throw InputError("report: acc out of [0,1]");
        if (model_id.empty() || spec_id.empty() || phase.empty())
            throw InputError("report: missing identity field");
    }
};

// Bundles the three evaluation metrics for one model checkpoint.
inline MetricsReport evaluate(const TinyLM& model, const FingerprintSpec& spec,
                              const DialogueDataset& heldout, const std::vector<ClsProbe>& cls_task) {
    if (heldout.empty()) throw InputError("evaluate: empty held-out set");
    MetricsReport r;
    r.fsr = fsr(model, spec);
    r.ppl = perplexity(model, heldout);
    r.acc = cls_accuracy(model, cls_task);
    r.model_id = param_digest(model.params);
    r.spec_id = spec_digest(spec);
    r.phase = "eval";
    r.seed = model.config.seed;
    r.validate();
    return r;
}

// ---- CSV report rows ---------------------------------------------------------

inline constexpr const char* kCsvHeader = "run_id,phase,scheme,seed,fsr,ppl,acc";

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
}

inline std::string csv_row(const std::string& run_id, const std::string& phase,
                           const std::string& scheme, std::uint64_t seed, double fsr_v, double ppl_v,
                           double acc_v) {
    return run_id + "," + phase + "," + scheme + "," + std::to_string(seed) + "," +
           format_metric(fsr_v) + "," + format_metric(ppl_v) + "," + format_metric(acc_v);
}

}  // namespace fperase
