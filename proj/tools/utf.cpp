// utf: under-trained-token fingerprinting pipeline.
//
// Subcommands: detect, fingerprint, embed, verify, evaluate, demo.
// Exit codes: 0 success (verify: matched), 2 input error, 1 internal error,
// 3 verify ran cleanly but the output did not match.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "utf/digest.hpp"
#include "utf/errors.hpp"
#include "utf/evalharness.hpp"
#include "utf/pipeline.hpp"
#include "utf/rng.hpp"
#include "utf/verifier.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitNotMatched = 3;

struct GlobalFlags {
    bool json = false;
};

void emit(const GlobalFlags& flags, const nlohmann::json& doc, const std::string& human) {
    if (flags.json)
        std::cout << doc.dump(2) << std::endl;
    else
        std::cout << human << std::endl;
}

// Every run logs its fully-resolved settings so results can be reproduced.
void log_config(const std::string& name, const nlohmann::json& resolved) {
    std::cerr << "[utf] " << name << " config: " << resolved.dump() << std::endl;
}

utf::DecodeSpec make_decode_spec(const std::string& mode, const utf::SamplingConfig& sampling) {
    utf::DecodeSpec spec;
    if (mode == "greedy") {
        spec.mode = utf::DecodeMode::greedy;
    } else if (mode == "sampled") {
        spec.mode = utf::DecodeMode::sampled;
        spec.sampling = sampling;
    } else {
        throw utf::InputError("unknown decode mode: " + mode);
    }
    return spec;
}

int cmd_detect(const GlobalFlags& flags, const std::string& matrix_path,
               const std::vector<utf::TokenId>& unused, double percentile,
               const std::string& report_path, std::string distances_path) {
    if (distances_path.empty()) {
        std::filesystem::path p = report_path;
        p.replace_extension(".distances.ufpm");
        distances_path = p.string();
    }
    log_config("detect", {{"matrix", matrix_path},
                          {"unused", unused},
                          {"percentile", percentile},
                          {"report", report_path},
                          {"distances", distances_path}});

    const utf::UnembeddingMatrix u = utf::load_matrix(matrix_path);
    const utf::DetectionReport report = utf::detect(u, unused, percentile);
    utf::save_report(report, report_path, distances_path);

    emit(flags,
         {{"tau", report.tau},
          {"percentile", report.percentile},
          {"flagged_count", report.flagged.size()},
          {"report", report_path}},
         "flagged " + std::to_string(report.flagged.size()) + " of " + std::to_string(u.rows) +
             " tokens (tau " + std::to_string(report.tau) + "); report: " + report_path);
    return kExitOk;
}

int cmd_fingerprint(const GlobalFlags& flags, const std::string& report_path, std::uint64_t seed,
                    int n_min, int n_max, int m, const std::string& pair_path) {
    log_config("fingerprint", {{"report", report_path},
                               {"seed", seed},
                               {"n_range", {n_min, n_max}},
                               {"m", m},
                               {"pair", pair_path}});
    const utf::DetectionReport report = utf::load_report(report_path);
    const utf::FingerprintPair pair = utf::make_pair(report, seed, {n_min, n_max}, m);
    const utf::DecimalTokenRenderer renderer;
    if (!utf::roundtrip_check(renderer, pair))
        throw utf::RenderRoundTripFailure("pair failed the renderer round-trip");
    utf::save_pair(pair, pair_path);

    emit(flags,
         {{"trigger_len", pair.trigger.size()},
          {"target_len", pair.target.size()},
          {"report_digest", utf::to_hex(pair.source_report_digest)},
          {"pair", pair_path}},
         "fingerprint pair written to " + pair_path + " (trigger " +
             std::to_string(pair.trigger.size()) + " tokens, target " +
             std::to_string(pair.target.size()) + ")");
    return kExitOk;
}

int cmd_embed(const GlobalFlags& flags, const std::string& model_path,
              const std::string& pair_path, const std::string& out_path, int epochs, double lr,
              int copies, bool no_auto_scale, const std::string& log_path) {
    log_config("embed", {{"model", model_path},
                         {"pair", pair_path},
                         {"out", out_path},
                         {"epochs", epochs},
                         {"lr", lr},
                         {"copies", copies},
                         {"auto_scale_lr", !no_auto_scale}});

    utf::ToyLM model = utf::load_model(model_path);
    const utf::FingerprintPair pair = utf::load_pair(pair_path);

    const auto rows = utf::build_sft_rows(pair, copies);
    std::vector<std::pair<utf::TokenSeq, utf::TokenSeq>> row_pairs;
    for (const auto& row : rows) row_pairs.emplace_back(row.input, row.target);

    std::ofstream log_file;
    utf::SftOptions opts;
    opts.auto_scale_lr = !no_auto_scale;
    if (!log_path.empty()) {
        log_file.open(log_path, std::ios::trunc);
        opts.log = &log_file;
    }

    const utf::TrainStats stats = utf::sft_embed(model, row_pairs, epochs, lr, opts);
    utf::save_model(model, out_path);

    // Sidecar stats make the efficiency metric recoverable by `evaluate`.
    nlohmann::json stats_doc = {{"seconds", stats.seconds},
                                {"effective_lr", stats.lr},
                                {"lr_escalations", stats.lr_escalations},
                                {"epochs", stats.epochs},
                                {"final_loss", stats.epoch_losses.back()}};
    std::ofstream stats_out(out_path + ".stats.json", std::ios::trunc);
    stats_out << stats_doc.dump(2) << '\n';

    emit(flags,
         {{"out", out_path},
          {"seconds", stats.seconds},
          {"effective_lr", stats.lr},
          {"lr_escalations", stats.lr_escalations},
          {"final_loss", stats.epoch_losses.back()}},
         "fingerprint embedded in " + std::to_string(stats.seconds) + " s (lr " +
             std::to_string(stats.lr) + "); model: " + out_path);
    return kExitOk;
}

int cmd_verify(const GlobalFlags& flags, const std::string& pair_path,
               const std::string& model_path, const std::string& endpoint,
               const std::string& mode, const utf::SamplingConfig& sampling, double timeout,
               const std::string& api_path) {
    log_config("verify", {{"pair", pair_path},
                          {"model", model_path},
                          {"endpoint", endpoint},
                          {"mode", mode},
                          {"timeout", timeout}});
    if (model_path.empty() == endpoint.empty())
        throw utf::InputError("pass exactly one of --model or --endpoint");

    const utf::FingerprintPair pair = utf::load_pair(pair_path);
    const utf::DecodeSpec spec = make_decode_spec(mode, sampling);

    utf::VerificationResult result;
    if (!model_path.empty()) {
        const utf::ToyLM model = utf::load_model(model_path);
        result = utf::verify_local(model, pair, spec);
    } else {
        utf::RemoteOptions options;
        options.timeout_seconds = timeout;
        options.path = api_path;
        if (const char* token = std::getenv("UTF_BEARER_TOKEN")) options.bearer_token = token;
        const utf::DecimalTokenRenderer renderer;
        result = utf::verify_remote(endpoint, pair, renderer, spec, options);
    }

    emit(flags,
         {{"matched", result.matched},
          {"emitted", result.emitted},
          {"decode_mode", result.decode_mode},
          {"transport", result.transport},
          {"latency_ms", result.latency_ms}},
         std::string(result.matched ? "MATCHED" : "NOT MATCHED") + " (" + result.decode_mode +
             ", " + result.transport + ")");
    return result.matched ? kExitOk : kExitNotMatched;
}

int cmd_evaluate(const GlobalFlags& flags, const std::string& vanilla_path,
                 const std::string& model_path, const std::string& pair_path,
                 const std::string& heldout_path, const std::string& downstream_a,
                 const std::string& downstream_b, int trials, std::uint64_t master_seed,
                 int sampled_seeds, const std::string& out_path) {
    log_config("evaluate", {{"vanilla", vanilla_path},
                            {"model", model_path},
                            {"pair", pair_path},
                            {"heldout", heldout_path},
                            {"trials", trials},
                            {"master_seed", master_seed}});

    const utf::ToyLM vanilla = utf::load_model(vanilla_path);
    const utf::ToyLM model = utf::load_model(model_path);
    const utf::FingerprintPair pair = utf::load_pair(pair_path);
    const auto heldout = utf::load_corpus(heldout_path, model.config.vocab_size);

    utf::MetricReport metrics;
    metrics.effectiveness_fsr = utf::measure_effectiveness(model, pair);

    int sampled_matches = 0;
    for (int i = 0; i < sampled_seeds; ++i) {
        utf::DecodeSpec spec;
        spec.mode = utf::DecodeMode::sampled;
        spec.sampling.seed = utf::derive_seed(master_seed, 200 + static_cast<std::uint64_t>(i));
        if (utf::measure_effectiveness(model, pair, spec) == 100.0) ++sampled_matches;
    }

    utf::ReliabilityOptions rel_opts;
    rel_opts.trials = trials;
    rel_opts.master_seed = master_seed;
    const utf::ReliabilityResult reliability = utf::measure_reliability(model, pair, rel_opts);
    metrics.reliability_pct = reliability.pct;

    metrics.harmlessness = utf::measure_harmlessness(vanilla, model, heldout);

    std::vector<utf::FinetuneSchedule> schedules;
    if (!downstream_a.empty())
        schedules.push_back(
            {"downstream_3ep_lr2e-5", utf::load_corpus(downstream_a, model.config.vocab_size), 3, 2e-5});
    if (!downstream_b.empty())
        schedules.push_back(
            {"downstream_1ep_lr2e-5", utf::load_corpus(downstream_b, model.config.vocab_size), 1, 2e-5});
    if (!schedules.empty())
        metrics.persistence = utf::measure_persistence(model, pair, schedules);

    // Efficiency is a property of the embedding run; recover it from the
    // sidecar the embed subcommand writes, when present.
    const std::string stats_path = model_path + ".stats.json";
    if (std::ifstream stats_in(stats_path); stats_in.is_open()) {
        try {
            nlohmann::json stats_doc;
            stats_in >> stats_doc;
            metrics.efficiency_seconds = stats_doc.value("seconds", 0.0);
        } catch (const nlohmann::json::exception&) {
            std::cerr << "[utf] warning: could not parse " << stats_path << std::endl;
        }
    }

    metrics.provenance = {
        {"master_seed", master_seed},
        {"reliability",
         {{"trials", reliability.trials},
          {"matches", reliability.matches},
          {"trigger_collisions", reliability.trigger_collisions}}},
        {"effectiveness", {{"sampled_seeds", sampled_seeds}, {"sampled_matches", sampled_matches}}},
        {"artifacts",
         {{"vanilla", vanilla_path}, {"model", model_path}, {"pair", pair_path}}},
    };

    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        if (!out.is_open()) throw utf::IoFailure("cannot open for writing: " + out_path);
        out << metrics.to_json().dump(2) << '\n';
    }
    emit(flags, metrics.to_json(), metrics.table());
    return kExitOk;
}

int cmd_demo(const GlobalFlags& flags, utf::PipelineConfig config) {
    config.progress = &std::cerr;
    log_config("demo", {{"seed", config.seed},
                        {"pretrain_epochs", config.pretrain_epochs},
                        {"sft_epochs", config.sft_epochs},
                        {"sft_lr", config.sft_lr},
                        {"reliability_trials", config.reliability_trials},
                        {"out_dir", config.out_dir ? config.out_dir->string() : ""}});
    const utf::PipelineResult result = utf::run_pipeline(config);
    emit(flags, result.metrics.to_json(), result.metrics.table());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"under-trained-token fingerprinting for desk-scale language models"};
    app.require_subcommand(1);

    GlobalFlags flags;
    app.add_flag("--json", flags.json, "machine-readable JSON on stdout");

    // detect
    auto* detect = app.add_subcommand("detect", "scan an unembedding matrix for under-trained tokens");
    std::string matrix_path, report_path, distances_path;
    std::vector<utf::TokenId> unused_ids;
    double percentile = 0.02;
    detect->add_option("--matrix", matrix_path, "UFPM matrix file")->required();
    detect->add_option("--unused", unused_ids, "known unused token ids")->required()->delimiter(',');
    detect->add_option("--percentile", percentile, "distance quantile (default 0.02)");
    detect->add_option("--report", report_path, "output report JSON")->required();
    detect->add_option("--distances", distances_path, "output distances sidecar (UFPM)");

    // fingerprint
    auto* fingerprint = app.add_subcommand("fingerprint", "draw a trigger/target pair from a report");
    std::string fp_report, fp_pair;
    std::uint64_t fp_seed = 1;
    int n_min = 11, n_max = 15, m_len = 5;
    fingerprint->add_option("--report", fp_report, "detection report JSON")->required();
    fingerprint->add_option("--seed", fp_seed, "pair seed")->required();
    fingerprint->add_option("--n-min", n_min, "trigger length lower bound");
    fingerprint->add_option("--n-max", n_max, "trigger length upper bound");
    fingerprint->add_option("--m", m_len, "target length");
    fingerprint->add_option("--pair", fp_pair, "output pair JSON")->required();

    // embed
    auto* embed = app.add_subcommand("embed", "fine-tune the fingerprint mapping into a model");
    std::string em_model, em_pair, em_out, em_log;
    int em_epochs = 30, em_copies = 10;
    double em_lr = 2e-5;
    bool em_no_auto_scale = false;
    embed->add_option("--model", em_model, "input checkpoint (UFPC)")->required();
    embed->add_option("--pair", em_pair, "fingerprint pair JSON")->required();
    embed->add_option("--out", em_out, "output checkpoint")->required();
    embed->add_option("--epochs", em_epochs, "SFT epochs (default 30)");
    embed->add_option("--lr", em_lr, "SFT learning rate (default 2e-5)");
    embed->add_option("--copies", em_copies, "repeated rows in the SFT set (default 10)");
    embed->add_flag("--no-auto-scale-lr", em_no_auto_scale, "fail instead of escalating the lr");
    embed->add_option("--log", em_log, "epoch log (JSONL)");

    // verify
    auto* verify = app.add_subcommand("verify", "probe a model for the fingerprint");
    std::string ve_pair, ve_model, ve_endpoint, ve_mode = "greedy", ve_path = "/v1/completions";
    utf::SamplingConfig ve_sampling;
    double ve_timeout = 30.0;
    verify->add_option("--pair", ve_pair, "fingerprint pair JSON")->required();
    verify->add_option("--model", ve_model, "local checkpoint (UFPC)");
    verify->add_option("--endpoint", ve_endpoint, "completions endpoint, e.g. http://host:8080");
    verify->add_option("--mode", ve_mode, "greedy|sampled (default greedy)");
    verify->add_option("--top-k", ve_sampling.top_k, "sampled mode top_k (default 50)");
    verify->add_option("--top-p", ve_sampling.top_p, "sampled mode top_p (default 0.95)");
    verify->add_option("--temperature", ve_sampling.temperature, "sampled mode temperature (default 0.7)");
    verify->add_option("--sample-seed", ve_sampling.seed, "sampled mode seed");
    verify->add_option("--timeout", ve_timeout, "remote timeout seconds (default 30)");
    verify->add_option("--path", ve_path, "remote API path (default /v1/completions)");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "run the metric suite on persisted artifacts");
    std::string ev_vanilla, ev_model, ev_pair, ev_heldout, ev_a, ev_b, ev_out;
    int ev_trials = 500, ev_sampled = 20;
    std::uint64_t ev_seed = 1;
    evaluate->add_option("--vanilla", ev_vanilla, "pre-embedding checkpoint")->required();
    evaluate->add_option("--model", ev_model, "fingerprinted checkpoint")->required();
    evaluate->add_option("--pair", ev_pair, "fingerprint pair JSON")->required();
    evaluate->add_option("--heldout", ev_heldout, "held-out corpus")->required();
    evaluate->add_option("--downstream-a", ev_a, "persistence corpus for the 3-epoch schedule");
    evaluate->add_option("--downstream-b", ev_b, "persistence corpus for the 1-epoch schedule");
    evaluate->add_option("--trials", ev_trials, "reliability probes (default 500)");
    evaluate->add_option("--master-seed", ev_seed, "probe master seed");
    evaluate->add_option("--sampled-seeds", ev_sampled, "sampled-effectiveness seeds (default 20)");
    evaluate->add_option("--out", ev_out, "write the metric report JSON here");

    // demo
    auto* demo = app.add_subcommand("demo", "full pipeline: pretrain, detect, embed, verify, evaluate");
    utf::PipelineConfig demo_config;
    std::string demo_out_dir;
    demo->add_option("--seed", demo_config.seed, "master seed (default 1)");
    demo->add_option("--out-dir", demo_out_dir, "artifact directory");
    demo->add_option("--pretrain-sequences", demo_config.pretrain_sequences, "pretraining corpus size");
    demo->add_option("--pretrain-epochs", demo_config.pretrain_epochs, "pretraining epochs (default 3)");
    demo->add_option("--sft-epochs", demo_config.sft_epochs, "fingerprint SFT epochs (default 30)");
    demo->add_option("--sft-lr", demo_config.sft_lr, "fingerprint SFT learning rate (default 2e-5)");
    demo->add_option("--copies", demo_config.sft_copies, "repeated SFT rows (default 10)");
    demo->add_option("--trials", demo_config.reliability_trials, "reliability probes (default 500)");

    // global flags like --json may appear after the subcommand name
    for (auto* sub : {detect, fingerprint, embed, verify, evaluate, demo}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitInput;
    }

    try {
        if (detect->parsed())
            return cmd_detect(flags, matrix_path, unused_ids, percentile, report_path,
                              distances_path);
        if (fingerprint->parsed())
            return cmd_fingerprint(flags, fp_report, fp_seed, n_min, n_max, m_len, fp_pair);
        if (embed->parsed())
            return cmd_embed(flags, em_model, em_pair, em_out, em_epochs, em_lr, em_copies,
                             em_no_auto_scale, em_log);
        if (verify->parsed())
            return cmd_verify(flags, ve_pair, ve_model, ve_endpoint, ve_mode, ve_sampling,
                              ve_timeout, ve_path);
        if (evaluate->parsed())
            return cmd_evaluate(flags, ev_vanilla, ev_model, ev_pair, ev_heldout, ev_a, ev_b,
                                ev_trials, ev_seed, ev_sampled, ev_out);
        if (demo->parsed()) {
            if (!demo_out_dir.empty()) demo_config.out_dir = demo_out_dir;
            return cmd_demo(flags, demo_config);
        }
    } catch (const utf::InputError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitInput;
    } catch (const utf::Error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitInternal;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << std::endl;
        return kExitInternal;
    }
    return kExitInternal;
}
