#pragma once

#include <cmath>
#include <cstdint>

#include "fperase/errors.hpp"
#include "fperase/tensor.hpp"

namespace fperase {

// Adam with fixed beta1=0.9, beta2=0.999, eps=1e-8 and bias correction.
// Moments are kept per named tensor and in float32, matching the weights.
struct AdamState {
    ParamSet m;
    ParamSet v;
    std::int64_t t = 0;

    static AdamState zeros_like(const ParamSet& params) {
        AdamState s;
        for (const auto& [name, tensor] : params) {
            s.m.emplace(name, Tensor::zeros(tensor.shape));
            s.v.emplace(name, Tensor::zeros(tensor.shape));
        }
        return s;
    }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One optimizer step; returns the updated parameters and advances the state.
inline ParamSet adam_step(const ParamSet& params, const ParamSet& grads, AdamState& state, double lr) {
    check_same_schema(params, grads, "adam_step");
    check_same_schema(params, state.m, "adam_step(state.m)");
    check_same_schema(params, state.v, "adam_step(state.v)");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
    ParamSet out = params;
    auto ig = grads.begin();
    auto im = state.m.begin();
    auto iv = state.v.begin();
    for (auto& [name, p] : out) {
        const auto& g = ig->second;
        auto& m = im->second;
        auto& v = iv->second;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gi = g.data[i];
            const double mi = kAdamBeta1 * m.data[i] + (1.0 - kAdamBeta1) * gi;
            const double vi = kAdamBeta2 * v.data[i] + (1.0 - kAdamBeta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            const double m_hat = mi / bc1;
            const double v_hat = vi / bc2;
            p.data[i] = static_cast<float>(p.data[i] - lr * m_hat / (std::sqrt(v_hat) + kAdamEps));
        }
        ++ig;
        ++im;
        ++iv;
    }
    return out;
}

}  // namespace fperase
