#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "utf/detector.hpp"
#include "utf/tensorio.hpp"

namespace utf {

// Secret trigger -> target mapping sampled from the flagged under-trained
// token set. The record remembers which detection report it came from.
struct FingerprintPair {
    TokenSeq trigger;                     // length n, distinct ids
    TokenSeq target;                      // length m, distinct ids
    std::uint64_t seed = 0;
    std::uint64_t source_report_digest = 0;

    bool operator==(const FingerprintPair& other) const = default;
};

// One supervised fine-tuning row: the model should map input to target.
struct SftRow {
    TokenSeq input;
    TokenSeq target;
};

// Draw n uniform from [n_range.first, n_range.second], then n distinct
// trigger ids and m distinct target ids from the flagged set (trigger and
// target may overlap each other). Deterministic in (report digest, seed,
// n_range, m).
FingerprintPair make_pair(const DetectionReport& report, std::uint64_t seed,
                          std::pair<int, int> n_range = {11, 15}, int m = 5);

// `copies` identical rows of (trigger, target). The row count is an artifact
// default; training steps consume them one by one.
std::vector<SftRow> build_sft_rows(const FingerprintPair& pair, int copies = 10);

// Record JSON:
//   {"version":1,"seed":s,"trigger":[...],"target":[...],"report_digest":"hex"}
void save_pair(const FingerprintPair& pair, const std::filesystem::path& path);
FingerprintPair load_pair(const std::filesystem::path& path);

// Structural check against declared lengths; MalformedRecord on violation.
void validate_pair_lengths(const FingerprintPair& pair, std::pair<int, int> n_range = {11, 15},
                           int m = 5);

// Provenance check: digest match plus flagged-set membership of every id.
// DigestMismatch when the pair references a different report.
void validate_pair_against_report(const FingerprintPair& pair, const DetectionReport& report);

}  // namespace utf
