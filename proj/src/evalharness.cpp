#include "utf/evalharness.hpp"

#include <iomanip>
#include <sstream>

#include "utf/errors.hpp"
#include "utf/rng.hpp"

namespace utf {

double measure_effectiveness(const ToyLM& model, const FingerprintPair& pair,
                             const DecodeSpec& spec) {
    return verify_local(model, pair, spec).matched ? 100.0 : 0.0;
}

TokenSeq reliability_probe(std::uint64_t master_seed, int trial, std::pair<int, int> len_range,
                           int vocab_size) {
    Rng rng(derive_seed(master_seed, static_cast<std::uint64_t>(trial)));
    const auto len = rng.range(len_range.first, len_range.second);
    TokenSeq probe;
    probe.reserve(static_cast<std::size_t>(len));
    for (std::int64_t i = 0; i < len; ++i)
        probe.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab_size))));
    return probe;
}

ReliabilityResult measure_reliability_with(const DecodeFn& decode, int vocab_size,
                                           const FingerprintPair& pair,
                                           const ReliabilityOptions& opts) {
    if (opts.trials < 1) throw InputError("trials must be >= 1");
    if (opts.len_range.first < 1 || opts.len_range.second < opts.len_range.first)
        throw InputError("bad probe length range");

    const int m = static_cast<int>(pair.target.size());
    ReliabilityResult result;
    result.trials = opts.trials;
    for (int trial = 0; trial < opts.trials; ++trial) {
        TokenSeq probe = reliability_probe(opts.master_seed, trial, opts.len_range, vocab_size);
        // A probe that guesses the trigger exactly is not a *random* input;
        // redraw from follow-on streams. The collision count stays in the
        // result so the random-guess bound can be asserted.
        int redraw = 1;
        while (probe == pair.trigger) {
            ++result.trigger_collisions;
            probe = reliability_probe(opts.master_seed, trial + redraw * opts.trials,
                                      opts.len_range, vocab_size);
            ++redraw;
        }
        if (decode(probe, m) == pair.target) ++result.matches;
    }
    result.pct = 100.0 * static_cast<double>(opts.trials - result.matches) /
                 static_cast<double>(opts.trials);
    return result;
}

ReliabilityResult measure_reliability(const ToyLM& model, const FingerprintPair& pair,
                                      const ReliabilityOptions& opts) {
    const DecodeFn decode = [&model](const TokenSeq& prompt, int max_new) {
        return greedy_decode(model, prompt, max_new);
    };
    return measure_reliability_with(decode, model.config.vocab_size, pair, opts);
}

double measure_efficiency(ToyLM& model, std::span<const std::pair<TokenSeq, TokenSeq>> rows,
                          int epochs, double lr, const SftOptions& opts) {
    return sft_embed(model, rows, epochs, lr, opts).seconds;
}

HarmlessnessReport measure_harmlessness(const ToyLM& before, const ToyLM& after,
                                        const std::vector<TokenSeq>& heldout) {
    HarmlessnessReport report;
    report.ppl_before = perplexity(before, heldout);
    report.ppl_after = perplexity(after, heldout);
    report.relative_delta = (report.ppl_after - report.ppl_before) / report.ppl_before;
    return report;
}

std::map<std::string, double> measure_persistence(const ToyLM& model, const FingerprintPair& pair,
                                                  const std::vector<FinetuneSchedule>& schedules) {
    if (schedules.empty()) throw InputError("persistence needs at least one schedule");
    std::map<std::string, double> fsr;
    for (const auto& schedule : schedules) {
        ToyLM clone = model;
        finetune(clone, schedule.corpus, schedule.epochs, schedule.lr);
        fsr[schedule.name] = measure_effectiveness(clone, pair);
    }
    return fsr;
}

nlohmann::json MetricReport::to_json(bool include_timings) const {
    nlohmann::json doc = {
        {"effectiveness_fsr", effectiveness_fsr},
        {"reliability_pct", reliability_pct},
        {"efficiency_seconds", efficiency_seconds},
        {"harmlessness",
         {{"ppl_before", harmlessness.ppl_before},
          {"ppl_after", harmlessness.ppl_after},
          {"relative_delta", harmlessness.relative_delta}}},
        {"persistence", persistence},
        {"provenance", provenance},
    };
    if (!include_timings) {
        doc.erase("efficiency_seconds");
        if (doc["provenance"].is_object()) doc["provenance"].erase("timings");
    }
    return doc;
}

std::string MetricReport::table() const {
    std::ostringstream out;
    out << std::fixed;
    out << "metric          value\n";
    out << "--------------  --------------------\n";
    out << "effectiveness   " << std::setprecision(1) << effectiveness_fsr << " %\n";
    out << "reliability     " << std::setprecision(2) << reliability_pct << " %\n";
    out << "efficiency      " << std::setprecision(2) << efficiency_seconds << " s\n";
    out << "harmlessness    ppl " << std::setprecision(3) << harmlessness.ppl_before << " -> "
        << harmlessness.ppl_after << " (" << std::showpos << std::setprecision(2)
        << 100.0 * harmlessness.relative_delta << std::noshowpos << " %)\n";
    for (const auto& [name, value] : persistence)
        out << "persistence     " << name << ": " << std::setprecision(1) << value << " %\n";
    return out.str();
}

}  // namespace utf
