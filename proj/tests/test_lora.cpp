#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fperase/corpus.hpp"
#include "fperase/lora.hpp"
#include "fperase/model.hpp"
#include "fperase/train.hpp"

using namespace fperase;

namespace {

LmConfig desk_config(std::uint64_t seed = 1) {
    LmConfig cfg;
    cfg.seed = seed;
    return cfg;
}

// Eigenvalues of a small symmetric matrix by cyclic Jacobi; the oracle for
// the numerical-rank check.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::int64_t n) {
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) off += std::abs(a[std::size_t(p * n + q)]);
        if (off < 1e-14) break;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a[std::size_t(p * n + q)];
                if (std::abs(apq) < 1e-18) continue;
                const double app = a[std::size_t(p * n + p)];
                const double aqq = a[std::size_t(q * n + q)];
                const double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
                const double c = std::cos(theta), s = std::sin(theta);
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = a[std::size_t(k * n + p)];
                    const double akq = a[std::size_t(k * n + q)];
                    a[std::size_t(k * n + p)] = c * akp - s * akq;
                    a[std::size_t(k * n + q)] = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = a[std::size_t(p * n + k)];
                    const double aqk = a[std::size_t(q * n + k)];
                    a[std::size_t(p * n + k)] = c * apk - s * aqk;
                    a[std::size_t(q * n + k)] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) eig[std::size_t(i)] = a[std::size_t(i * n + i)];
    return eig;
}

}  // namespace

TEST_CASE("a freshly created adapter is a no-op on model outputs") {
    auto cfg = desk_config(2);
    auto model = init_model(cfg);
    auto attached = lora_attach(model, lora_create(model, 4, 8.0f, 5));
    const std::vector<int> prompt{1, 5, 9, 2};
    CHECK(forward_logits(attached, prompt).data == forward_logits(model, prompt).data);
}

TEST_CASE("adapter accepts published defaults and rejects oversized ranks") {
    auto model = init_model(desk_config());
    CHECK_NOTHROW(lora_create(model, 16, 32.0f, 1));
    CHECK_THROWS_AS(lora_create(model, 33, 8.0f, 1), DimError);
    CHECK_THROWS_AS(lora_create(model, 0, 8.0f, 1), DimError);
}

TEST_CASE("materialized delta has numerical rank at most the adapter rank") {
    auto model = init_model(desk_config(3));
    auto adapter = lora_create(model, 4, 8.0f, 7);
    // Give the up factors mass so the delta is nonzero.
    Rng rng(99);
    for (auto& [name, f] : adapter.targets)
        for (auto& v : f.up.data) v = static_cast<float>(rng.normal()) * 0.1f;

    for (const auto& [name, f] : adapter.targets) {
        const Tensor delta = adapter.delta(name);
        const std::int64_t n = delta.cols();
        // Gram matrix of the delta; its eigenvalues are squared singular values.
        std::vector<double> gram(std::size_t(n * n), 0.0);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < delta.rows(); ++r)
                    acc += double(delta.at(r, i)) * double(delta.at(r, j));
                gram[std::size_t(i * n + j)] = acc;
            }
        auto eig = symmetric_eigenvalues(gram, n);
        double mx = 0.0;
        for (double e : eig) mx = std::max(mx, e);
        std::int64_t numerical_rank = 0;
        for (double e : eig)
            if (e > 1e-8 * mx) ++numerical_rank;
        INFO(name << ": rank " << numerical_rank);
        CHECK(numerical_rank <= adapter.rank);
        CHECK(numerical_rank >= 1);
    }
}

TEST_CASE("merging a zero adapter leaves the model unchanged") {
    auto model = init_model(desk_config(4));
    auto zero = lora_create(model, 4, 8.0f, 11);
    auto merged = lora_merge(model, zero);
    CHECK(params_equal(merged.params, model.params));

    // Additive identity: merge(merge(m, zero), a) == merge(m, a).
    auto a = lora_create(model, 4, 8.0f, 12);
    Rng rng(1);
    for (auto& [name, f] : a.targets)
        for (auto& v : f.up.data) v = static_cast<float>(rng.normal()) * 0.05f;
    CHECK(params_equal(lora_merge(lora_merge(model, zero), a).params, lora_merge(model, a).params));
}

TEST_CASE("merge scales linearly in the up factor") {
    auto model = init_model(desk_config(5));
    auto a = lora_create(model, 4, 8.0f, 13);
    Rng rng(2);
    for (auto& [name, f] : a.targets)
        for (auto& v : f.up.data) v = static_cast<float>(rng.normal()) * 0.05f;
    auto doubled = a;
    for (auto& [name, f] : doubled.targets)
        for (auto& v : f.up.data) v *= 2.0f;
    for (const auto& [name, f] : a.targets) {
        const Tensor d1 = a.delta(name);
        const Tensor d2 = doubled.delta(name);
        for (std::size_t i = 0; i < d1.data.size(); ++i)
            CHECK(d2.data[i] == Catch::Approx(2.0f * d1.data[i]).margin(1e-7));
    }
}

TEST_CASE("merged weights equal runtime-attached evaluation") {
    auto cfg = desk_config(6);
    auto model = init_model(cfg);
    auto attached = lora_attach(model, lora_create(model, 4, 8.0f, 17));
    auto data = generate_corpus(cfg, 12, 8);

    TrainOptions opts;
    opts.epochs = 4;
    opts.lr = 2e-3;
    opts.mode = TrainMode::AdapterOnly;
    auto trained = train(attached, data, opts).model;

    auto merged = lora_merge_attached(trained);
    const std::vector<int> prompt{3, 1, 4, 1, 5};
    const Tensor via_adapter = forward_logits(trained, prompt);
    const Tensor via_merge = forward_logits(merged, prompt);
    REQUIRE(via_adapter.data.size() == via_merge.data.size());
    for (std::size_t i = 0; i < via_merge.data.size(); ++i)
        CHECK(via_merge.data[i] == Catch::Approx(via_adapter.data[i]).margin(1e-5));

    SECTION("extract round-trips the effective weights bit-exactly") {
        auto extracted = lora_extract(trained);
        TinyLM base_only{trained.config, trained.params, {}};
        CHECK(params_equal(lora_merge(base_only, extracted).params, effective_params(trained)));
    }
}

TEST_CASE("extract immediately after create returns a zero-delta adapter") {
    auto model = init_model(desk_config(7));
    auto attached = lora_attach(model, lora_create(model, 4, 8.0f, 19));
    auto extracted = lora_extract(attached);
    for (const auto& [name, f] : extracted.targets)
        for (float v : f.up.data) CHECK(v == 0.0f);
}

TEST_CASE("extract without an adapter is a state error") {
    CHECK_THROWS_AS(lora_extract(init_model(desk_config())), StateError);
}

TEST_CASE("an adapter merged into a different checkpoint changes only q and v") {
    auto cfg = desk_config(8);
    auto donor = init_model(cfg);
    auto adapter = lora_create(donor, 4, 8.0f, 23);
    Rng rng(3);
    for (auto& [name, f] : adapter.targets)
        for (auto& v : f.up.data) v = static_cast<float>(rng.normal()) * 0.05f;

    LmConfig other_cfg = cfg;
    other_cfg.seed = 77;
    auto other = init_model(other_cfg);
    auto merged = lora_merge(other, adapter);
    for (const auto& [name, t] : merged.params) {
        const bool is_target = adapter.targets.count(name) > 0;
        const bool differs = t.data != other.params.at(name).data;
        CHECK(differs == is_target);
    }
}

TEST_CASE("merge rejects adapters that do not match the model schema") {
    auto model = init_model(desk_config(9));
    auto adapter = lora_create(model, 4, 8.0f, 29);
    auto orphan = adapter.targets.begin()->second;
    adapter.targets.emplace("layer9.wq", orphan);
    CHECK_THROWS_AS(lora_merge(model, adapter), SchemaError);
}
