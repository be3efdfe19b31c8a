#include "utf/fingerprint.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"
#include "utf/digest.hpp"
#include "utf/errors.hpp"
#include "utf/rng.hpp"

namespace utf {

FingerprintPair make_pair(const DetectionReport& report, std::uint64_t seed,
                          std::pair<int, int> n_range, int m) {
    const auto [lo, hi] = n_range;
    if (lo < 1 || hi < lo) throw InputError("bad trigger length range");
    if (m < 1) throw InputError("target length must be >= 1");

    const auto& flagged = report.flagged;
    if (static_cast<int>(flagged.size()) < hi + m)
        throw InsufficientFlaggedTokens(
            "need at least " + std::to_string(hi + m) + " flagged tokens, report has " +
            std::to_string(flagged.size()));

    FingerprintPair pair;
    pair.seed = seed;
    pair.source_report_digest = report.digest();

    // Mixing the report digest into the stream seed makes the draw a function
    // of (report, seed), not of the seed alone.
    Rng rng(derive_seed(seed, pair.source_report_digest));

    const int n = static_cast<int>(rng.range(lo, hi));
    for (std::size_t idx : rng.sample_without_replacement(flagged.size(), static_cast<std::size_t>(n)))
        pair.trigger.push_back(flagged[idx]);
    for (std::size_t idx : rng.sample_without_replacement(flagged.size(), static_cast<std::size_t>(m)))
        pair.target.push_back(flagged[idx]);
    return pair;
}

std::vector<SftRow> build_sft_rows(const FingerprintPair& pair, int copies) {
    if (copies < 1) throw InputError("copies must be >= 1");
    std::vector<SftRow> rows;
    rows.reserve(static_cast<std::size_t>(copies));
    for (int i = 0; i < copies; ++i) rows.push_back({pair.trigger, pair.target});
    return rows;
}

void save_pair(const FingerprintPair& pair, const std::filesystem::path& path) {
    nlohmann::json doc = {
        {"version", 1},
        {"seed", pair.seed},
        {"trigger", pair.trigger},
        {"target", pair.target},
        {"report_digest", to_hex(pair.source_report_digest)},
    };
    std::ofstream out(path, std::ios::trunc);
    if (!out.is_open()) throw IoFailure("cannot open for writing: " + path.string());
    out << doc.dump(2) << '\n';
    if (!out.good()) throw IoFailure("write failed: " + path.string());
}

FingerprintPair load_pair(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw IoFailure("cannot open " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedRecord(std::string("bad fingerprint JSON: ") + e.what());
    }

    FingerprintPair pair;
    try {
        if (doc.at("version").get<int>() != 1)
            throw MalformedRecord("unsupported fingerprint record version");
        pair.seed = doc.at("seed").get<std::uint64_t>();
        pair.trigger = doc.at("trigger").get<TokenSeq>();
        pair.target = doc.at("target").get<TokenSeq>();
        pair.source_report_digest = from_hex(doc.at("report_digest").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw MalformedRecord(std::string("bad fingerprint JSON: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw MalformedRecord(e.what());
    }
    if (pair.trigger.empty() || pair.target.empty())
        throw MalformedRecord("trigger and target must be non-empty");
    for (TokenId t : pair.trigger)
        if (t < 0) throw MalformedRecord("negative trigger token id");
    for (TokenId t : pair.target)
        if (t < 0) throw MalformedRecord("negative target token id");
    return pair;
}

void validate_pair_lengths(const FingerprintPair& pair, std::pair<int, int> n_range, int m) {
    const int n = static_cast<int>(pair.trigger.size());
    if (n < n_range.first || n > n_range.second)
        throw MalformedRecord("trigger length " + std::to_string(n) + " outside [" +
                              std::to_string(n_range.first) + "," + std::to_string(n_range.second) +
                              "]");
    if (static_cast<int>(pair.target.size()) != m)
        throw MalformedRecord("target length " + std::to_string(pair.target.size()) +
                              " != declared m=" + std::to_string(m));
    const std::set<TokenId> trig(pair.trigger.begin(), pair.trigger.end());
    if (trig.size() != pair.trigger.size())
        throw MalformedRecord("trigger ids must be distinct");
    const std::set<TokenId> tgt(pair.target.begin(), pair.target.end());
    if (tgt.size() != pair.target.size())
        throw MalformedRecord("target ids must be distinct");
}

void validate_pair_against_report(const FingerprintPair& pair, const DetectionReport& report) {
    if (pair.source_report_digest != report.digest())
        throw DigestMismatch("pair references report " + to_hex(pair.source_report_digest) +
                             ", got " + to_hex(report.digest()));
    const std::set<TokenId> flagged(report.flagged.begin(), report.flagged.end());
    for (TokenId t : pair.trigger)
        if (!flagged.count(t))
            throw DigestMismatch("trigger id " + std::to_string(t) + " is not flagged");
    for (TokenId t : pair.target)
        if (!flagged.count(t))
            throw DigestMismatch("target id " + std::to_string(t) + " is not flagged");
}

}  // namespace utf
