#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "utf/corpus.hpp"
#include "utf/detector.hpp"
#include "utf/evalharness.hpp"
#include "utf/fingerprint.hpp"
#include "utf/toylm.hpp"

namespace utf {

// Everything the end-to-end run needs, derived from one master seed. Defaults
// are the shipped experiment: pretrain a 512-vocab model with 64 reserved
// ids, detect, build one fingerprint pair, embed it, measure all five
// metrics.
struct PipelineConfig {
    std::uint64_t seed = 1;
    ToyLMConfig model;

    int pretrain_sequences = 2000;
    int heldout_sequences = 200;
    int downstream_sequences = 500;
    int corpus_branching = 4;
    int corpus_min_len = 24;
    int corpus_max_len = 48;

    int pretrain_epochs = 3;
    double pretrain_lr = 1.0;
    int pretrain_batch = 16;

    int sft_epochs = 30;
    double sft_lr = 2e-5;
    int sft_copies = 50;
    bool sft_auto_scale_lr = true;

    std::pair<int, int> n_range = {11, 15};
    int m = 5;
    int unused_count = 3;  // known placeholder ids: the top ids of the vocab

    double sweep_lo = 0.02;
    double sweep_hi = 0.15;
    double sweep_step = 0.01;

    int reliability_trials = 500;
    int sampled_seeds = 20;

    std::optional<std::filesystem::path> out_dir;  // artifact directory
    std::ostream* progress = nullptr;              // human log (stderr in the CLI)
};

struct SweepPoint {
    double percentile = 0.0;
    int flagged_total = 0;
    int reserved_flagged = 0;  // flagged ids inside the reserved range
};

struct PipelineResult {
    ToyLM vanilla;
    ToyLM fingerprinted;
    DetectionReport report;        // at pair_percentile
    double pair_percentile = 0.0;  // smallest sweep point able to feed make_pair
    FingerprintPair pair;
    std::vector<SweepPoint> sweep;
    TrainStats pretrain_stats;
    TrainStats sft_stats;
    int sampled_matches = 0;  // of config.sampled_seeds greedy-equivalent probes
    std::vector<TokenSeq> heldout_corpus;
    MetricReport metrics;
};

// Seed streams (derive_seed(seed, n)): 1 model init, 2 pretrain shuffle,
// 3 fingerprint pair, 4 reliability master, 100/101/102/103 corpora.
PipelineResult run_pipeline(const PipelineConfig& config);

// File names used inside out_dir (also consumed by the CLI subcommands).
namespace artifact {
inline constexpr const char* kPretrainCorpus = "pretrain.txt";
inline constexpr const char* kHeldoutCorpus = "heldout.txt";
inline constexpr const char* kDownstreamA = "downstream_a.txt";
inline constexpr const char* kDownstreamB = "downstream_b.txt";
inline constexpr const char* kVanillaModel = "vanilla.ufpc";
inline constexpr const char* kFingerprintedModel = "fingerprinted.ufpc";
inline constexpr const char* kUnembedding = "unembedding.ufpm";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kDistances = "distances.ufpm";
inline constexpr const char* kPair = "pair.json";
inline constexpr const char* kMetrics = "metrics.json";
inline constexpr const char* kPretrainLog = "pretrain_log.jsonl";
inline constexpr const char* kSftLog = "sft_log.jsonl";
}  // namespace artifact

}  // namespace utf
