#include "utf/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <ostream>

#include "utf/errors.hpp"
#include "utf/rng.hpp"
#include "utf/verifier.hpp"

namespace utf {

namespace {

void note(std::ostream* progress, const std::string& msg) {
    if (progress) *progress << "[utf] " << msg << std::endl;
}

int count_reserved(const std::vector<TokenId>& flagged, const ToyLMConfig& cfg) {
    const TokenId first_reserved = static_cast<TokenId>(cfg.vocab_size - cfg.reserved_count);
    int n = 0;
    for (TokenId t : flagged)
        if (t >= first_reserved) ++n;
    return n;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
    config.model.validate();
    if (config.corpus_max_len > config.model.context_len)
        throw InputError("corpus sequences would exceed the model context");
    if (config.unused_count < 1 || config.unused_count > config.model.reserved_count)
        throw InputError("unused_count must select reserved ids");

    PipelineResult result;

    // --- corpora ---
    CorpusSpec corpus_spec;
    corpus_spec.usable_vocab = config.model.usable_vocab();
    corpus_spec.branching = config.corpus_branching;
    corpus_spec.min_len = config.corpus_min_len;
    corpus_spec.max_len = config.corpus_max_len;

    // Pretrain and held-out share one chain (held-out = fresh sequences from
    // the training distribution); the downstream corpora are attacker data
    // from unrelated chains.
    const std::uint64_t chain_seed = derive_seed(config.seed, 99);
    corpus_spec.n_sequences = config.pretrain_sequences;
    const auto pretrain_corpus =
        make_markov_corpus(corpus_spec, chain_seed, derive_seed(config.seed, 100));
    corpus_spec.n_sequences = config.heldout_sequences;
    result.heldout_corpus =
        make_markov_corpus(corpus_spec, chain_seed, derive_seed(config.seed, 101));
    corpus_spec.n_sequences = config.downstream_sequences;
    const auto downstream_a = make_markov_corpus(corpus_spec, derive_seed(config.seed, 102));
    const auto downstream_b = make_markov_corpus(corpus_spec, derive_seed(config.seed, 103));

    // --- pretrain the vanilla model ---
    note(config.progress, "initializing model (vocab " +
                              std::to_string(config.model.vocab_size) + ", hidden " +
                              std::to_string(config.model.hidden_dim) + ")");
    result.vanilla = init_model(config.model, derive_seed(config.seed, 1));

    std::ofstream pretrain_log;
    TrainOptions pretrain_opts;
    pretrain_opts.batch_size = config.pretrain_batch;
    pretrain_opts.shuffle_seed = derive_seed(config.seed, 2);
    if (config.out_dir) {
        std::filesystem::create_directories(*config.out_dir);
        pretrain_log.open(*config.out_dir / artifact::kPretrainLog, std::ios::trunc);
        pretrain_opts.log = &pretrain_log;
    }
    note(config.progress, "pretraining " + std::to_string(config.pretrain_epochs) + " epochs on " +
                              std::to_string(pretrain_corpus.size()) + " sequences");
    result.pretrain_stats = pretrain(result.vanilla, pretrain_corpus, config.pretrain_epochs,
                                     config.pretrain_lr, pretrain_opts);

    // --- detection sweep ---
    const UnembeddingMatrix unembedding = export_unembedding(result.vanilla);
    std::vector<TokenId> unused;
    for (int i = 0; i < config.unused_count; ++i)
        unused.push_back(static_cast<TokenId>(config.model.vocab_size - 1 - i));

    const int need = config.n_range.second + config.m;
    double pair_percentile = 0.0;
    for (int i = 0;; ++i) {
        const double p = config.sweep_lo + static_cast<double>(i) * config.sweep_step;
        if (p > config.sweep_hi + config.sweep_step * 0.5) break;
        const DetectionReport report = detect(unembedding, unused, p);
        SweepPoint point;
        point.percentile = p;
        point.flagged_total = static_cast<int>(report.flagged.size());
        point.reserved_flagged = count_reserved(report.flagged, config.model);
        result.sweep.push_back(point);
        if (pair_percentile == 0.0 && point.flagged_total >= need) {
            pair_percentile = p;
            result.report = report;
        }
    }
    if (pair_percentile == 0.0)
        throw InsufficientFlaggedTokens("no sweep percentile flags enough tokens for a pair");
    result.pair_percentile = pair_percentile;
    note(config.progress, "detection at percentile " + std::to_string(pair_percentile) +
                              " flagged " + std::to_string(result.report.flagged.size()) +
                              " tokens");

    // --- fingerprint pair ---
    result.pair = make_pair(result.report, derive_seed(config.seed, 3), config.n_range, config.m);
    const DecimalTokenRenderer renderer;
    if (!roundtrip_check(renderer, result.pair))
        throw RenderRoundTripFailure("decimal renderer failed the pair round-trip");

    // --- embed ---
    result.fingerprinted = result.vanilla;
    const auto rows = build_sft_rows(result.pair, config.sft_copies);
    std::vector<std::pair<TokenSeq, TokenSeq>> row_pairs;
    for (const auto& row : rows) row_pairs.emplace_back(row.input, row.target);

    std::ofstream sft_log;
    SftOptions sft_opts;
    sft_opts.auto_scale_lr = config.sft_auto_scale_lr;
    if (config.out_dir) {
        sft_log.open(*config.out_dir / artifact::kSftLog, std::ios::trunc);
        sft_opts.log = &sft_log;
    }
    note(config.progress, "embedding fingerprint (" + std::to_string(rows.size()) + " rows, " +
                              std::to_string(config.sft_epochs) + " epochs)");
    result.sft_stats =
        sft_embed(result.fingerprinted, row_pairs, config.sft_epochs, config.sft_lr, sft_opts);
    note(config.progress,
         "embedded at lr " + std::to_string(result.sft_stats.lr) + " in " +
             std::to_string(result.sft_stats.seconds) + " s");

    // --- metrics ---
    MetricReport& metrics = result.metrics;
    metrics.effectiveness_fsr = measure_effectiveness(result.fingerprinted, result.pair);
    result.sampled_matches = 0;
    for (int i = 0; i < config.sampled_seeds; ++i) {
        DecodeSpec spec;
        spec.mode = DecodeMode::sampled;
        spec.sampling.seed = derive_seed(config.seed, 200 + static_cast<std::uint64_t>(i));
        if (measure_effectiveness(result.fingerprinted, result.pair, spec) == 100.0)
            ++result.sampled_matches;
    }

    ReliabilityOptions rel_opts;
    rel_opts.trials = config.reliability_trials;
    rel_opts.len_range = config.n_range;
    rel_opts.master_seed = derive_seed(config.seed, 4);
    note(config.progress, "reliability: " + std::to_string(rel_opts.trials) + " random probes");
    const ReliabilityResult reliability =
        measure_reliability(result.fingerprinted, result.pair, rel_opts);
    metrics.reliability_pct = reliability.pct;

    metrics.efficiency_seconds = result.sft_stats.seconds;
    metrics.harmlessness =
        measure_harmlessness(result.vanilla, result.fingerprinted, result.heldout_corpus);

    note(config.progress, "persistence: fine-tuning on two downstream corpora");
    std::vector<FinetuneSchedule> schedules = {
        {"downstream_3ep_lr2e-5", downstream_a, 3, 2e-5},
        {"downstream_1ep_lr2e-5", downstream_b, 1, 2e-5},
    };
    const auto persistence_start = std::chrono::steady_clock::now();
    metrics.persistence = measure_persistence(result.fingerprinted, result.pair, schedules);
    const double persistence_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - persistence_start)
            .count();

    nlohmann::json sweep_json = nlohmann::json::array();
    for (const auto& point : result.sweep)
        sweep_json.push_back({{"percentile", point.percentile},
                              {"flagged", point.flagged_total},
                              {"reserved_flagged", point.reserved_flagged}});
    metrics.provenance = {
        {"seed", config.seed},
        {"model",
         {{"vocab_size", config.model.vocab_size},
          {"reserved_count", config.model.reserved_count},
          {"hidden_dim", config.model.hidden_dim},
          {"layers", config.model.layers},
          {"heads", config.model.heads},
          {"context_len", config.model.context_len},
          {"tied_unembedding", config.model.tied_unembedding}}},
        {"corpora",
         {{"pretrain_sequences", config.pretrain_sequences},
          {"heldout_sequences", config.heldout_sequences},
          {"downstream_sequences", config.downstream_sequences},
          {"branching", config.corpus_branching},
          {"len_range", {config.corpus_min_len, config.corpus_max_len}}}},
        {"pretrain",
         {{"epochs", config.pretrain_epochs},
          {"lr", config.pretrain_lr},
          {"batch_size", config.pretrain_batch},
          {"final_loss", result.pretrain_stats.epoch_losses.empty()
                             ? 0.0
                             : result.pretrain_stats.epoch_losses.back()}}},
        {"sft",
         {{"epochs", config.sft_epochs},
          {"requested_lr", config.sft_lr},
          {"effective_lr", result.sft_stats.lr},
          {"lr_escalations", result.sft_stats.lr_escalations},
          {"copies", config.sft_copies},
          {"target_margin",
           min_target_probability(result.fingerprinted, result.pair.trigger, result.pair.target)},
          {"final_loss",
           result.sft_stats.epoch_losses.empty() ? 0.0 : result.sft_stats.epoch_losses.back()}}},
        {"detection",
         {{"percentile", result.pair_percentile},
          {"unused_ids", result.report.unused_ids},
          {"flagged_count", result.report.flagged.size()},
          {"report_digest", result.pair.source_report_digest},
          {"sweep", sweep_json}}},
        {"fingerprint",
         {{"seed", result.pair.seed},
          {"trigger_len", result.pair.trigger.size()},
          {"target_len", result.pair.target.size()}}},
        {"effectiveness",
         {{"sampled_seeds", config.sampled_seeds}, {"sampled_matches", result.sampled_matches}}},
        {"reliability",
         {{"trials", reliability.trials},
          {"matches", reliability.matches},
          {"trigger_collisions", reliability.trigger_collisions},
          {"master_seed", rel_opts.master_seed},
          {"len_range", {rel_opts.len_range.first, rel_opts.len_range.second}}}},
        {"timings",
         {{"pretrain_seconds", result.pretrain_stats.seconds},
          {"sft_seconds", result.sft_stats.seconds},
          {"persistence_seconds_total", persistence_seconds}}},
    };

    // --- artifacts ---
    if (config.out_dir) {
        const auto& dir = *config.out_dir;
        save_corpus(pretrain_corpus, dir / artifact::kPretrainCorpus);
        save_corpus(result.heldout_corpus, dir / artifact::kHeldoutCorpus);
        save_corpus(downstream_a, dir / artifact::kDownstreamA);
        save_corpus(downstream_b, dir / artifact::kDownstreamB);
        save_model(result.vanilla, dir / artifact::kVanillaModel);
        save_model(result.fingerprinted, dir / artifact::kFingerprintedModel);
        // stats sidecar, so `evaluate` can recover the efficiency metric
        {
            nlohmann::json stats_doc = {
                {"seconds", result.sft_stats.seconds},
                {"effective_lr", result.sft_stats.lr},
                {"lr_escalations", result.sft_stats.lr_escalations},
                {"epochs", result.sft_stats.epochs},
                {"final_loss", result.sft_stats.epoch_losses.empty()
                                   ? 0.0
                                   : result.sft_stats.epoch_losses.back()}};
            std::ofstream stats_out(
                dir / (std::string(artifact::kFingerprintedModel) + ".stats.json"),
                std::ios::trunc);
            stats_out << stats_doc.dump(2) << '\n';
        }
        save_matrix(unembedding, dir / artifact::kUnembedding);
        save_report(result.report, dir / artifact::kReport, dir / artifact::kDistances);
        save_pair(result.pair, dir / artifact::kPair);
        std::ofstream metrics_out(dir / artifact::kMetrics, std::ios::trunc);
        metrics_out << metrics.to_json().dump(2) << '\n';
        note(config.progress, "artifacts written to " + dir.string());
    }

    return result;
}

}  // namespace utf
