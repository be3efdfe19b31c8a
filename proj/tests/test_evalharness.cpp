#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "utf/corpus.hpp"
#include "utf/errors.hpp"
#include "utf/evalharness.hpp"
#include "utf/rng.hpp"

using namespace utf;

namespace {

ToyLMConfig tiny_config() {
    ToyLMConfig cfg;
    cfg.vocab_size = 32;
    cfg.reserved_count = 8;
    cfg.hidden_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.context_len = 24;
    return cfg;
}

FingerprintPair stub_pair() {
    FingerprintPair pair;
    pair.trigger = {25, 28, 31, 24, 26, 29, 30, 27, 25, 31, 28};
    pair.target = {27, 24, 30, 26, 31};
    return pair;
}

std::vector<TokenSeq> tiny_corpus(int n, std::uint64_t seed) {
    CorpusSpec spec;
    spec.usable_vocab = 24;
    spec.branching = 4;
    spec.n_sequences = n;
    spec.min_len = 6;
    spec.max_len = 16;
    return make_markov_corpus(spec, seed);
}

}  // namespace

TEST_CASE("reliability estimator is exact on stub decoders") {
    const FingerprintPair pair = stub_pair();
    ReliabilityOptions opts;
    opts.trials = 500;
    opts.master_seed = 2718;

    for (int k : {0, 1, 7}) {
        // hard-wire the decoder to emit the target for exactly k of the probes
        std::set<TokenSeq> chosen;
        for (int i = 0; i < k; ++i)
            chosen.insert(reliability_probe(opts.master_seed, i, opts.len_range, 32));
        REQUIRE(static_cast<int>(chosen.size()) == k);

        const DecodeFn stub = [&](const TokenSeq& prompt, int max_new) -> TokenSeq {
            if (chosen.count(prompt)) return pair.target;
            return TokenSeq(static_cast<std::size_t>(max_new), 0);
        };
        const ReliabilityResult result = measure_reliability_with(stub, 32, pair, opts);
        CHECK(result.matches == k);
        CHECK(result.pct == 100.0 * (500.0 - k) / 500.0);
        CHECK(result.trials == 500);
    }
}

TEST_CASE("probes follow the declared law") {
    Rng unused(0);
    std::set<TokenSeq> seen;
    for (int trial = 0; trial < 200; ++trial) {
        const TokenSeq probe = reliability_probe(31337, trial, {11, 15}, 512);
        CHECK(probe.size() >= 11);
        CHECK(probe.size() <= 15);
        for (TokenId t : probe) {
            CHECK(t >= 0);
            CHECK(t < 512);
        }
        seen.insert(probe);
        // same trial reproduces the same probe
        CHECK(reliability_probe(31337, trial, {11, 15}, 512) == probe);
    }
    CHECK(seen.size() == 200);  // no duplicate probes at this scale
}

TEST_CASE("a probe equal to the trigger is redrawn, not scored") {
    FingerprintPair pair = stub_pair();
    ReliabilityOptions opts;
    opts.trials = 50;
    opts.master_seed = 11;
    // rig the pair so trial 3's probe IS the trigger
    pair.trigger = reliability_probe(opts.master_seed, 3, opts.len_range, 32);

    std::vector<TokenSeq> seen_prompts;
    const DecodeFn stub = [&](const TokenSeq& prompt, int max_new) -> TokenSeq {
        seen_prompts.push_back(prompt);
        return TokenSeq(static_cast<std::size_t>(max_new), 0);
    };
    const ReliabilityResult result = measure_reliability_with(stub, 32, pair, opts);
    CHECK(result.trigger_collisions == 1);
    CHECK(result.trials == 50);
    for (const auto& prompt : seen_prompts) CHECK(prompt != pair.trigger);
}

TEST_CASE("effectiveness and reliability on a real tiny model") {
    ToyLM model = init_model(tiny_config(), 71);
    pretrain(model, tiny_corpus(80, 9), 2, 2e-3);
    const FingerprintPair pair = stub_pair();

    CHECK(measure_effectiveness(model, pair) == 0.0);  // vanilla

    ToyLM embedded = model;
    std::vector<std::pair<TokenSeq, TokenSeq>> rows(10, {pair.trigger, pair.target});
    sft_embed(embedded, rows, 30, 2e-5);
    CHECK(measure_effectiveness(embedded, pair) == 100.0);

    ReliabilityOptions opts;
    opts.trials = 100;
    opts.master_seed = 5;
    const auto digest_before = embedded.param_digest();
    const ReliabilityResult result = measure_reliability(embedded, pair, opts);
    CHECK(embedded.param_digest() == digest_before);  // measurement never mutates
    CHECK(result.trials == 100);
    CHECK(result.pct >= 0.0);
    CHECK(result.pct <= 100.0);
}

TEST_CASE("harmlessness deltas") {
    ToyLM model = init_model(tiny_config(), 71);
    pretrain(model, tiny_corpus(80, 9), 2, 2e-3);
    const auto heldout = tiny_corpus(20, 77);

    SUBCASE("identical models have zero delta") {
        const HarmlessnessReport report = measure_harmlessness(model, model, heldout);
        CHECK(report.relative_delta == 0.0);
        CHECK(report.ppl_before == report.ppl_after);
    }
    SUBCASE("a corrupted model shows a large positive delta") {
        ToyLM corrupted = model;
        Rng rng(123);
        for (double& p : corrupted.params) p = rng.gaussian(0.0, 1.0);
        const HarmlessnessReport report = measure_harmlessness(model, corrupted, heldout);
        CHECK(report.relative_delta > 0.5);
    }
}

TEST_CASE("persistence requires schedules and reports per-schedule FSR") {
    ToyLM model = init_model(tiny_config(), 71);
    pretrain(model, tiny_corpus(80, 9), 2, 2e-3);
    const FingerprintPair pair = stub_pair();
    ToyLM embedded = model;
    std::vector<std::pair<TokenSeq, TokenSeq>> rows(10, {pair.trigger, pair.target});
    sft_embed(embedded, rows, 30, 2e-5);

    CHECK_THROWS_AS(measure_persistence(embedded, pair, {}), InputError);

    std::vector<FinetuneSchedule> schedules = {
        {"3ep", tiny_corpus(30, 101), 3, 2e-5},
        {"1ep", tiny_corpus(30, 102), 1, 2e-5},
    };
    const auto fsr = measure_persistence(embedded, pair, schedules);
    REQUIRE(fsr.size() == 2);
    CHECK(fsr.at("3ep") == 100.0);
    CHECK(fsr.at("1ep") == 100.0);
    // the probe model itself is untouched
    CHECK(measure_effectiveness(embedded, pair) == 100.0);
}

TEST_CASE("metric report JSON carries all five metrics") {
    MetricReport report;
    report.effectiveness_fsr = 100.0;
    report.reliability_pct = 99.4;
    report.efficiency_seconds = 12.5;
    report.harmlessness = {8.0, 8.1, 0.0125};
    report.persistence = {{"a", 100.0}, {"b", 100.0}};
    report.provenance = {{"seed", 1}, {"timings", {{"sft_seconds", 12.5}}}};

    const auto full = report.to_json();
    CHECK(full.contains("effectiveness_fsr"));
    CHECK(full.contains("reliability_pct"));
    CHECK(full.contains("efficiency_seconds"));
    CHECK(full.contains("harmlessness"));
    CHECK(full.contains("persistence"));
    CHECK(full.contains("provenance"));

    const auto deterministic = report.to_json(false);
    CHECK_FALSE(deterministic.contains("efficiency_seconds"));
    CHECK_FALSE(deterministic["provenance"].contains("timings"));
}
