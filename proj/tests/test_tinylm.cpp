#include <catch2/catch_amalgamated.hpp>

#include <cmath>

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

DialogueDataset slice(const DialogueDataset& ds, std::int64_t from, std::int64_t count) {
    DialogueDataset out;
    out.provenance = ds.provenance;
    for (std::int64_t i = from; i < from + count; ++i) out.pairs.push_back(ds.pairs[std::size_t(i)]);
    return out;
}

}  // namespace

TEST_CASE("generate_corpus is deterministic in the seed") {
    auto cfg = desk_config();
    auto a = generate_corpus(cfg, 50, 7);
    auto b = generate_corpus(cfg, 50, 7);
    CHECK(a.pairs == b.pairs);
    auto c = generate_corpus(cfg, 50, 8);
    CHECK(a.pairs != c.pairs);
}

TEST_CASE("paper-sized clean corpus is well formed") {
    auto cfg = desk_config();
    auto ds = generate_corpus(cfg, 600, 3);
    REQUIRE(ds.size() == 600);
    check_dataset(ds, cfg);
    for (const auto& p : ds.pairs) {
        CHECK(p.input.size() == std::size_t(kGrammarInputLen));
        CHECK(p.output.size() == std::size_t(kGrammarOutputLen));
        for (int t : p.input) CHECK(t < cfg.content_tokens());
        for (int t : p.output) CHECK(t < cfg.content_tokens());
    }
}

TEST_CASE("generate_corpus rejects sizes beyond the cap") {
    CHECK_THROWS_AS(generate_corpus(desk_config(), kCorpusCap + 1, 0), CapacityError);
    CHECK_THROWS_AS(generate_corpus(desk_config(), 0, 0), InputError);
}

TEST_CASE("grammar outputs apply the substitution map tokenwise") {
    auto cfg = desk_config();
    auto map = grammar_map(cfg, 11);
    auto ds = generate_corpus(cfg, 20, 11);
    for (const auto& p : ds.pairs)
        for (std::size_t j = 0; j < p.input.size(); ++j)
            CHECK(p.output[j] == map[std::size_t(p.input[j])]);
}

TEST_CASE("training on the grammar reaches low held-out perplexity", "[slow]") {
    auto cfg = desk_config(5);
    auto corpus = generate_corpus(cfg, 160, cfg.seed);
    auto train_split = slice(corpus, 0, 128);
    auto heldout = slice(corpus, 128, 32);

    auto model = init_model(cfg);
    TrainOptions opts;
    opts.epochs = 200;
    opts.lr = 3e-3;
    opts.seed = 17;
    auto result = train(model, train_split, opts);

    const double ppl = perplexity(result.model, heldout);
    INFO("held-out ppl " << ppl);
    CHECK(ppl < 0.5 * static_cast<double>(cfg.vocab_size));
}

TEST_CASE("train with zero epochs returns the model unchanged") {
    auto cfg = desk_config();
    auto model = init_model(cfg);
    auto data = generate_corpus(cfg, 8, 2);
    TrainOptions opts;
    opts.epochs = 0;
    auto result = train(model, data, opts);
    CHECK(params_equal(result.model.params, model.params));
}

TEST_CASE("a single repeated pair is driven below 0.01 loss within 200 epochs") {
    auto cfg = desk_config(9);
    auto model = init_model(cfg);
    DialogueDataset one;
    one.pairs.push_back(generate_corpus(cfg, 1, 33).pairs[0]);

    TrainOptions opts;
    opts.epochs = 200;
    opts.lr = 6e-3;
    opts.seed = 4;
    double final_loss = 1e9;
    auto result = train(model, one, opts, [&](std::int64_t, const TinyLM&, double loss) {
        final_loss = loss;
        return loss >= 0.01;
    });
    INFO("final loss " << final_loss);
    CHECK(final_loss < 0.01);

    SECTION("greedy decode reproduces the overfitted pair") {
        const auto& p = one.pairs[0];
        CHECK(greedy_decode(result.model, p.input, static_cast<std::int64_t>(p.output.size())) ==
              p.output);
    }
}

TEST_CASE("adapter-only training never touches base weights") {
    auto cfg = desk_config(3);
    auto model = init_model(cfg);
    auto adapter = lora_create(model, 4, 8.0f, 21);
    auto attached = lora_attach(model, adapter);
    auto data = generate_corpus(cfg, 16, 6);

    TrainOptions opts;
    opts.epochs = 3;
    opts.lr = 1e-3;
    opts.mode = TrainMode::AdapterOnly;
    auto result = train(attached, data, opts);

    CHECK(params_equal(result.model.params, model.params));
    REQUIRE(result.model.adapter.has_value());
    bool adapter_moved = false;
    for (const auto& [name, f] : result.model.adapter->targets)
        for (float v : f.up.data)
            if (v != 0.0f) adapter_moved = true;
    CHECK(adapter_moved);
}

TEST_CASE("training is bit-reproducible") {
    auto cfg = desk_config(12);
    auto model = init_model(cfg);
    auto data = generate_corpus(cfg, 24, 13);
    TrainOptions opts;
    opts.epochs = 5;
    opts.lr = 2e-3;
    opts.seed = 31;
    auto a = train(model, data, opts);
    auto b = train(model, data, opts);
    CHECK(params_equal(a.model.params, b.model.params));
    CHECK(a.epoch_losses == b.epoch_losses);
}

TEST_CASE("training loss trends downward across 10-epoch windows") {
    auto cfg = desk_config(8);
    auto model = init_model(cfg);
    auto data = generate_corpus(cfg, 32, 14);
    TrainOptions opts;
    opts.epochs = 40;
    opts.lr = 3e-3;
    opts.seed = 2;
    auto result = train(model, data, opts);
    std::int64_t ok = 0, total = 0;
    for (std::size_t e = 0; e + 10 < result.epoch_losses.size(); ++e) {
        ++total;
        if (result.epoch_losses[e + 10] <= result.epoch_losses[e]) ++ok;
    }
    INFO("windows ok " << ok << "/" << total);
    CHECK(static_cast<double>(ok) >= 0.9 * static_cast<double>(total));
}

TEST_CASE("divergent training reports the failing epoch") {
    auto cfg = desk_config(2);
    auto model = init_model(cfg);
    auto data = generate_corpus(cfg, 8, 3);
    TrainOptions opts;
    opts.epochs = 30;
    opts.lr = 1e9;
    CHECK_THROWS_AS(train(model, data, opts), DivergenceError);
}

TEST_CASE("greedy decode basics") {
    auto cfg = desk_config(4);
    auto model = init_model(cfg);

    CHECK(greedy_decode(model, {1, 2, 3}, 0).empty());
    CHECK(greedy_decode(model, {1, 2, 3}, 5) == greedy_decode(model, {1, 2, 3}, 5));
    CHECK_THROWS_AS(greedy_decode(model, std::vector<int>(30, 1), 5), CapacityError);
}

TEST_CASE("argmax is shift invariant and breaks ties low") {
    std::vector<float> row{0.5f, 2.0f, 2.0f, -1.0f};
    CHECK(argmax_lowest(row.data(), 4) == 1);
    std::vector<float> shifted = row;
    for (auto& v : shifted) v += 100.0f;
    CHECK(argmax_lowest(shifted.data(), 4) == argmax_lowest(row.data(), 4));
}

TEST_CASE("perplexity of the uniform-logit model equals vocab size") {
    auto cfg = desk_config(6);
    auto model = init_model(cfg);
    for (auto& [name, t] : model.params)
        for (auto& v : t.data) v = 0.0f;
    auto data = generate_corpus(cfg, 10, 5);
    CHECK(perplexity(model, data) == Catch::Approx(64.0).epsilon(1e-9));
}

TEST_CASE("perplexity matches direct evaluation of token log-probs") {
    CHECK(perplexity_from_logprobs({-1.0, -2.0, -3.0}) == Catch::Approx(std::exp(2.0)).epsilon(1e-12));
    CHECK(perplexity_from_logprobs({0.0, 0.0}) == Catch::Approx(1.0));
}

TEST_CASE("perplexity is at least 1 and order invariant") {
    auto cfg = desk_config(7);
    auto model = init_model(cfg);
    auto data = generate_corpus(cfg, 12, 9);
    const double p = perplexity(model, data);
    CHECK(p >= 1.0);

    DialogueDataset reversed = data;
    std::reverse(reversed.pairs.begin(), reversed.pairs.end());
    CHECK(perplexity(model, reversed) == Catch::Approx(p).epsilon(1e-10));

    CHECK_THROWS_AS(perplexity(model, DialogueDataset{}), InputError);
}
