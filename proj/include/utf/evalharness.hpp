#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "utf/fingerprint.hpp"
#include "utf/toylm.hpp"
#include "utf/verifier.hpp"

namespace utf {

// 100 if the model maps trigger to target under the given decoding, else 0.
// A single pair makes this inherently binary.
double measure_effectiveness(const ToyLM& model, const FingerprintPair& pair,
                             const DecodeSpec& spec = {});

struct ReliabilityOptions {
    int trials = 500;
    std::pair<int, int> len_range = {11, 15};
    std::uint64_t master_seed = 0;
};

struct ReliabilityResult {
    double pct = 0.0;        // 100 * (trials - matches) / trials
    int matches = 0;         // probes whose output equalled the target
    int trials = 0;
    int trigger_collisions = 0;  // probes that drew the trigger itself (redrawn)
};

// The probe for one trial: length uniform on len_range, tokens uniform over
// the entire vocabulary, all draws from derive_seed(master, trial). Exposed
// so stub tests can reproduce the exact probe set.
TokenSeq reliability_probe(std::uint64_t master_seed, int trial, std::pair<int, int> len_range,
                           int vocab_size);

using DecodeFn = std::function<TokenSeq(const TokenSeq& prompt, int max_new)>;

// Estimator core over an arbitrary decoder; stub-testable.
ReliabilityResult measure_reliability_with(const DecodeFn& decode, int vocab_size,
                                           const FingerprintPair& pair,
                                           const ReliabilityOptions& opts);

// Greedy-decoding reliability of the model itself. Read-only.
ReliabilityResult measure_reliability(const ToyLM& model, const FingerprintPair& pair,
                                      const ReliabilityOptions& opts);

// Wall-clock cost of the embedding step alone (runs sft_embed on the model).
double measure_efficiency(ToyLM& model, std::span<const std::pair<TokenSeq, TokenSeq>> rows,
                          int epochs = 30, double lr = 2e-5, const SftOptions& opts = {});

struct HarmlessnessReport {
    double ppl_before = 0.0;
    double ppl_after = 0.0;
    double relative_delta = 0.0;  // (after - before) / before
};

HarmlessnessReport measure_harmlessness(const ToyLM& before, const ToyLM& after,
                                        const std::vector<TokenSeq>& heldout);

struct FinetuneSchedule {
    std::string name;
    std::vector<TokenSeq> corpus;
    int epochs = 3;
    double lr = 2e-5;
};

// Clone, fine-tune, re-measure effectiveness (greedy), per schedule.
std::map<std::string, double> measure_persistence(const ToyLM& model, const FingerprintPair& pair,
                                                  const std::vector<FinetuneSchedule>& schedules);

// All five metrics plus the provenance needed to re-run them.
struct MetricReport {
    double effectiveness_fsr = 0.0;  // greedy, 0 or 100
    double reliability_pct = 0.0;
    double efficiency_seconds = 0.0;
    HarmlessnessReport harmlessness;
    std::map<std::string, double> persistence;  // schedule name -> FSR
    nlohmann::json provenance;                  // seeds, configs, schedules

    // include_timings=false drops the wall-clock fields (efficiency_seconds
    // and provenance["timings"]), leaving the run's reproducible content.
    nlohmann::json to_json(bool include_timings = true) const;
    std::string table() const;
};

}  // namespace utf
